from pathlib import Path

import pytest

from maskradar.config import Config, ConfigError, from_dict, load_config, toy_config

REPO = Path(__file__).resolve().parents[1]


class TestDefaults:
    def test_core_hyperparameters(self):
        c = Config()
        assert c.model.heads == (2, 4, 8)
        assert c.model.window == (4, 4, 4)
        assert c.shift.ratio == 0.25
        assert c.train.alpha == 0.4
        assert c.train.lr == 1e-4

    def test_design_defaults(self):
        c = Config()
        assert c.model.widths == (32, 64, 128)
        assert c.model.kernel == (9, 5, 5) and c.model.stride == (1, 2, 2)
        assert c.model.gamma_init == 0.5 and c.model.beta_init == 0.0
        assert c.detect.k_cls == (0.02, 0.03, 0.05) and c.detect.min_score == 0.1
        assert c.detect.meters_per_bin == 0.23
        assert len(c.detect.thresholds) == 9
        assert c.detect.thresholds[0] == 0.5 and c.detect.thresholds[-1] == 0.9

    def test_hash_stable_and_sensitive(self):
        assert Config().hash() == from_dict({}).hash()
        assert Config().hash() != load_config(None, {"train.alpha": 0.5}).hash()

    def test_toy_file_matches_toy_config(self):
        assert load_config(REPO / "configs" / "toy.yaml").to_dict() == toy_config().to_dict()


class TestLoading:
    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  alpha: 0.1\n  lr: 0.01\n")
        c = load_config(p, {"train.alpha": 0.7})
        assert c.train.alpha == 0.7 and c.train.lr == 0.01

    def test_lists_become_tuples(self):
        c = from_dict({"model": {"window": [2, 4, 4]}})
        assert c.model.window == (2, 4, 4)

    def test_int_promoted_to_float(self):
        assert from_dict({"train": {"lr": 1}}).train.lr == 1.0

    def test_round_trip_through_dump(self, tmp_path):
        c = toy_config()
        path = c.write(tmp_path)
        assert load_config(path).to_dict() == c.to_dict()

    def test_custom_cell(self):
        c = from_dict({"shift": {"pattern": "custom", "cell": [[0, 1], [-1, 0]]}})
        assert c.shift.cell == ((0, 1), (-1, 0))

    def test_bad_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("model: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(p)


@pytest.mark.parametrize("raw,match", [
    ({"modle": {}}, "unknown config section"),
    ({"model": {"widht": 3}}, "unknown key"),
    ({"model": []}, "must be a mapping"),
    ({"model": {"widths": [32, 64], "heads": [2, 4, 8]}}, "equal"),
    ({"model": {"widths": [33, 64, 128]}}, "divisible"),
    ({"model": {"stride": [2, 2, 2]}}, "temporal stride"),
    ({"model": {"gamma_init": 1.5}}, "gamma_init"),
    ({"model": {"head_prior": 1.0}}, "head_prior"),
    ({"model": {"precision": "float16"}}, "precision"),
    ({"model": {"ffn_ratio": True}}, "integer"),
    ({"train": {"schedule": "linear"}}, "train.schedule"),
    ({"train": {"warmup_steps": -1}}, "warmup_steps"),
    ({"shift": {"pattern": "D"}}, "shift.pattern"),
    ({"shift": {"pattern": "custom"}}, "requires shift.cell"),
    ({"shift": {"ratio": 1.5}}, "ratio"),
    ({"train": {"lr": 0}}, "Adam"),
    ({"train": {"lr": "fast"}}, "number"),
    ({"train": {"alpha": -0.1}}, "alpha"),
    ({"train": {"reduction": "max"}}, "reduction"),
    ({"detect": {"k_cls": [0.1, 0.2]}}, "k_cls"),
    ({"detect": {"k_cls": [0.1, 0.2, -0.1]}}, "positive"),
    ({"detect": {"range_min_m": 0}}, "range mapping"),
    ({"detect": {"ols_start": 0.95}}, "OLS sweep"),
    ({"data": {"split": 0}}, "split"),
    ({"data": {"difficulty": 5}}, "difficulty"),
])
def test_rejections(raw, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(raw)
