import numpy as np
import pytest

from latentsr.datagen import (
    LOGEXP_OPS,
    TRIG_OPS,
    CorpusEntry,
    GenConfig,
    add_noise,
    build_corpus,
    load_corpus,
    read_corpus_header,
    sample_dataset,
    sample_expression,
)
from latentsr.errors import GenerationTimeout
from latentsr.expr import complexity, evaluate, log, operators, prefix_text, var

x0 = var(0)


class TestSampleExpression:
    def test_single_token_is_leaf(self):
        cfg = GenConfig(max_tokens=1, max_vars=1)
        rng = np.random.default_rng(0)
        for _ in range(50):
            e = sample_expression(cfg, rng)
            assert e.is_leaf and e.op in ("var", "const")

    def test_caps_respected(self):
        cfg = GenConfig(ops=LOGEXP_OPS, max_tokens=15, max_vars=3)
        rng = np.random.default_rng(1)
        for _ in range(2000):
            e = sample_expression(cfg, rng)
            assert complexity(e) <= 15
            assert operators(e) <= set(LOGEXP_OPS)

    def test_deterministic(self):
        cfg = GenConfig(max_tokens=9, max_vars=2)
        a = [prefix_text(sample_expression(cfg, np.random.default_rng(7))) for _ in range(3)]
        b = [prefix_text(sample_expression(cfg, np.random.default_rng(7))) for _ in range(3)]
        assert a == b

    def test_family_operator_present(self):
        cfg = GenConfig.for_family("trig", max_tokens=24, max_vars=2)
        rng = np.random.default_rng(2)
        for _ in range(200):
            e = sample_expression(cfg, rng)
            assert operators(e) & {"sin", "cos", "tan"}
            assert complexity(e) < 25


class TestSampleDataset:
    def test_identity(self):
        cfg = GenConfig(domain=(0.0, 1.0), m=5)
        X, y = sample_dataset(x0, cfg, np.random.default_rng(0))
        assert X.shape == (5, 1)
        np.testing.assert_array_equal(y, X[:, 0])
        assert ((X >= 0) & (X <= 1)).all()

    def test_log_domain_filtered(self):
        cfg = GenConfig(domain=(-1.0, 1.0), m=100)
        X, y = sample_dataset(log(x0), cfg, np.random.default_rng(0))
        assert (X > 0).all()
        assert np.isfinite(y).all()

    def test_reciprocal_finite(self):
        cfg = GenConfig(domain=(-1e-301, 1e-301), m=20)
        e = 1.0 / x0
        with pytest.raises(GenerationTimeout):
            sample_dataset(e, cfg, np.random.default_rng(0))
        X, y = sample_dataset(e, GenConfig(m=500), np.random.default_rng(1))
        assert np.isfinite(y).all()

    def test_exact_pairing(self):
        cfg = GenConfig(max_tokens=9, max_vars=2, m=40)
        rng = np.random.default_rng(3)
        for _ in range(100):
            e = sample_expression(cfg, rng)
            try:
                X, y = sample_dataset(e, cfg, rng, n_vars=2)
            except GenerationTimeout:
                continue
            np.testing.assert_array_equal(evaluate(e, X), y)


class TestAddNoise:
    def test_zero_level(self):
        ys = np.arange(10.0)
        np.testing.assert_array_equal(add_noise(ys, 0.0, np.random.default_rng(0)), ys)

    def test_constant_targets(self):
        ys = np.full(10, 3.0)
        np.testing.assert_array_equal(add_noise(ys, 0.1, np.random.default_rng(0)), ys)

    def test_noise_scale(self):
        rng = np.random.default_rng(0)
        ys = rng.uniform(-5, 5, 100_000)
        noisy = add_noise(ys, 0.1, np.random.default_rng(1))
        want = 0.1 * np.std(ys, ddof=1)
        assert np.std(noisy - ys, ddof=1) == pytest.approx(want, rel=0.05)


class TestBuildCorpus:
    def test_logexp_15(self, tmp_path):
        cfg = GenConfig(ops=LOGEXP_OPS, max_tokens=15, max_vars=3, m=8, seed=1)
        path = tmp_path / "c.jsonl"
        build_corpus(cfg, 2000, path)
        entries = load_corpus(path)
        assert len(entries) == 2000
        assert len({prefix_text(e.expr) for e in entries}) == 2000
        for e in entries[:200]:
            np.testing.assert_array_equal(evaluate(e.expr, e.X), e.y)

    def test_trig_25(self, tmp_path):
        cfg = GenConfig(ops=TRIG_OPS, max_tokens=25, max_vars=5, m=4, seed=2)
        path = tmp_path / "t.jsonl"
        build_corpus(cfg, 2000, path)
        entries = load_corpus(path)
        ops = set().union(*(operators(e.expr) for e in entries))
        assert ops & {"sin", "cos", "tan"}
        assert all(e.family == "trig" for e in entries)

    def test_empty(self, tmp_path):
        path = tmp_path / "e.jsonl"
        build_corpus(GenConfig(), 0, path)
        assert load_corpus(path) == []

    def test_byte_identical(self, tmp_path):
        cfg = GenConfig(max_tokens=9, max_vars=2, m=8, seed=5)
        build_corpus(cfg, 100, tmp_path / "a.jsonl", header={"k": 1})
        build_corpus(cfg, 100, tmp_path / "b.jsonl", header={"k": 1})
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert read_corpus_header(tmp_path / "a.jsonl") == {"k": 1}

    def test_partial_file_removed(self, tmp_path, monkeypatch):
        import latentsr.datagen as dg

        def boom(*a, **k):
            raise GenerationTimeout("x")

        monkeypatch.setattr(dg, "sample_expression", boom)
        path = tmp_path / "f.jsonl"
        with pytest.raises(GenerationTimeout):
            build_corpus(GenConfig(), 5, path)
        assert not path.exists()
        assert not (tmp_path / "f.jsonl.partial").exists()

    def test_json_round_trip(self):
        cfg = GenConfig(max_tokens=9, max_vars=2, m=6)
        rng = np.random.default_rng(0)
        e = sample_expression(cfg, rng)
        X, y = sample_dataset(e, cfg, rng, n_vars=2)
        entry = CorpusEntry(e, X, y, "logexp", 2, 9)
        back = CorpusEntry.from_json(entry.to_json())
        assert back.expr == e
        np.testing.assert_array_equal(back.X, X)
        np.testing.assert_array_equal(back.y, y)
