import numpy as np
import pytest

from conftest import tiny_config
from rankexperts import pipeline
from rankexperts.experts import FrozenSelector


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("tiny"))
    pipeline.run_all(cfg)
    return cfg


def test_outputs_index(tiny_run):
    import json

    idx = json.loads(pipeline.paths(tiny_run)["index"].read_text())
    assert set(idx["stages"]) >= {"train-dense", "compress", "train-router", "build-cache", "eval", "bench"}
    for files in idx["stages"].values():
        for f in files:
            assert (tiny_run.out / f).exists()


def test_eval_schema(tiny_run):
    rows = pipeline.read_csv(pipeline.paths(tiny_run)["eval"])
    assert list(rows[0]) == ["domain", "variant", "ratio", "ppl", "delta_ppl"]
    assert {r["domain"] for r in rows} == set(tiny_run.corpus.domains)
    for r in rows:
        if r["variant"] == "dense":
            assert float(r["delta_ppl"]) == 0.0


def test_calib_grid_shape(tiny_run):
    out = pipeline.paths(tiny_run)["observe"]
    rows = pipeline.read_csv(out / "calib_grid.csv")
    assert len(rows) == len(tiny_run.corpus.domains) ** 2
    summ = pipeline.read_csv(out / "calib_grid_summary.csv")
    assert [r["calib"] for r in summ] == tiny_run.corpus.domains


def test_decode_curve_length(tiny_run):
    rows = pipeline.read_csv(pipeline.paths(tiny_run)["observe"] / "decode_overlap.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, tiny_run.observe.decode_steps + 1))


def test_cached_model_uses_retrieved_pattern(tiny_run):
    fm = pipeline.load_compressed(tiny_run)
    routers = pipeline.load_trained_routers(tiny_run)
    built = pipeline.load_built_cache(tiny_run)
    prompts, _ = pipeline.prompt_set(tiny_run, tiny_run.cache.prompts_per_domain, tiny_run.cache.prompt_len,
                                     pipeline._PROMPTS)
    m = pipeline.CachedModel(fm, routers, built)
    got = m.forward(prompts[0]).logits
    want = fm.forward(prompts[0][None, :], selector=FrozenSelector(built.patterns[0])).logits
    np.testing.assert_array_equal(got, want)


def test_stream_composition(tiny_run):
    tokens, labels = pipeline.mixed_stream(tiny_run)
    assert len(tokens) == len(labels) * tiny_run.eval.window
    assert sorted(set(labels)) == sorted(tiny_run.eval.stream_windows)


def test_spike_ratio():
    assert pipeline.spike_ratio([1.0, 2.0, 4.0]) == 2.0


def test_unknown_figure(tiny_run):
    with pytest.raises(ValueError, match="unknown figure"):
        pipeline.cmd_observe(tiny_run, "fig9")


def test_compress_clears_stale_routers(tiny_run, tmp_path):
    import shutil

    cfg = tiny_config(tmp_path / "o")
    shutil.copytree(tiny_run.out / "dense", cfg.out / "dense")
    shutil.copytree(tiny_run.out / "compressed", cfg.out / "compressed")
    pipeline.cmd_compress(cfg, ratio=0.2)
    with pytest.raises(pipeline.MissingPrerequisite):
        pipeline.load_trained_routers(cfg)
