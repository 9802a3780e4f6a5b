import csv
import json

import numpy as np
import pytest

from netcompress.cli import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, PROFILE_COLUMNS,
                             SEARCH_TRACE_COLUMNS, config_from_dict, load_config, main, run_job)
from netcompress.datasets import load_dataset
from netcompress.exceptions import ConfigError
from netcompress.lc import LcConfig, lc_run
from netcompress.metrics import CURVE_DEFAULTS, memory_footprint, synthetic_curve
from netcompress.schemes import Compose, Prune, Quantize
from netcompress.search import BlackBox, TwoStageSearch
from netcompress.seeding import STREAMS, stream_seed
from netcompress.tensor_net import TrainConfig, load_model, mlp, save_model, train

LIGHT_LC = {"outer_iters": 20, "l_step_batches": 10, "first_l_step_batches": 60}

SYNTHETIC = """
seed = 3
accuracy = "synthetic:logistic"

[task]
dataset = "blobs"

[model]
arch = "mlp"
hidden = [4]

[train]
epochs = 2

[scheme]
type = "prune"

[objective]
name = "synthetic:knee"

[level_set]
T = 6
"""


def blobs_doc(**over):
    doc = {
        "seed": 0,
        "task": {"dataset": "blobs", "n": 200},
        "model": {"arch": "mlp", "hidden": [16]},
        "train": {"learning_rate": 0.05, "batch_size": 16, "epochs": 50},
        "scheme": {"type": "compose", "schemes": [{"type": "prune"}, {"type": "quantize"}]},
        "objective": {"name": "footprint_min"},
        "level_set": {"T": 6},
        "lc": dict(LIGHT_LC),
    }
    doc.update(over)
    return doc


def write_toml(path, text):
    path.write_text(text)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def blobs_job(tmp_path_factory):
    out = tmp_path_factory.mktemp("job")
    cfg = config_from_dict(blobs_doc(), output_dir=str(out))
    assert run_job(cfg) == EXIT_OK
    return cfg, out


def test_synthetic_job(tmp_path):
    cfg = write_toml(tmp_path / "job.toml", SYNTHETIC)
    assert main(["search", "--config", cfg, "--out", str(tmp_path / "out")]) == EXIT_OK
    rows = read_csv(tmp_path / "out" / "search_trace.csv")
    assert tuple(rows[0]) == SEARCH_TRACE_COLUMNS
    assert 1 <= len(rows) - 1 <= 2 * 6
    result = json.loads((tmp_path / "out" / "result.json").read_text())
    assert result["s_star"] <= result["s_acc"]
    assert not list((tmp_path / "out").glob("lc_trace_*.csv"))


def test_invalid_epsilon_writes_nothing(tmp_path, capsys):
    text = SYNTHETIC.replace("T = 6", "T = 6\nepsilon = 1.5")
    cfg = write_toml(tmp_path / "job.toml", text)
    out = tmp_path / "out"
    assert main(["search", "--config", cfg, "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    assert "epsilon" in capsys.readouterr().err


def test_infeasible_search_exit_code(tmp_path, monkeypatch):
    # the step falls below the level before both seed points, and T=2 allows nothing else
    monkeypatch.setitem(CURVE_DEFAULTS["step"], "at", 0.1)
    text = SYNTHETIC.replace("synthetic:logistic", "synthetic:step").replace("T = 6", "T = 2")
    path = write_toml(tmp_path / "job.toml", text)
    out = tmp_path / "out"
    assert main(["search", "--config", path, "--out", str(out)]) == EXIT_INFEASIBLE
    trace = read_csv(out / "search_trace.csv")
    assert [r[2] for r in trace[1:]] == ["0.25", "0.75"]
    assert all(r[-1] == "False" for r in trace[1:])
    assert not (out / "result.json").exists()


@pytest.mark.parametrize("doc,fragment", [
    ({"level_set": {"gamma": 2}}, "gamma"),
    ({"model": {"arch": "rnn"}}, "arch"),
    ({"objective": {"name": "latency"}}, "objective"),
    ({"scheme": {"type": "prune", "typo": 1}}, "scheme"),
    ({"lc": {"seed": 1}}, "seed"),
    ({"extra": 1}, "unknown"),
    ({"accuracy": "synthetic:wiggle"}, "wiggle"),
])
def test_config_errors(doc, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(blobs_doc(**doc))


def test_artifacts_complete(blobs_job):
    cfg, out = blobs_job
    result = json.loads((out / "result.json").read_text())
    for name in ("reference.json", "compressed.json"):
        load_model(out / name)
    assert not (out / "thinned.json").exists()
    trace = read_csv(out / "search_trace.csv")
    assert tuple(trace[0]) == SEARCH_TRACE_COLUMNS
    lc_traces = sorted(out.glob("lc_trace_*.csv"))
    assert len(lc_traces) == result["evaluations"]["compressions"]
    for p in lc_traces:
        assert len(read_csv(p)) == LIGHT_LC["outer_iters"] + 1
    assert result["s_star"] == result["s_acc"]
    assert result["accuracy"] >= result["level"]


def test_library_parity(blobs_job):
    cfg, out = blobs_job
    result = json.loads((out / "result.json").read_text())

    ds = load_dataset("blobs", seed=stream_seed(0, "data"), n=200)
    model = mlp(2, [16], 2, stream_seed(0, "init"))
    ref, _ = train(model, ds, TrainConfig(learning_rate=0.05, batch_size=16, epochs=50,
                                          seed=stream_seed(0, "train")))
    lc_cfg = LcConfig(seed=stream_seed(0, "lc"), **LIGHT_LC)
    scheme = Compose([Prune(), Quantize()])
    cache = {}

    def compress(s):
        key = round(s, 12)
        if key not in cache:
            cache[key] = lc_run(ref, scheme, s, ds, lc_cfg)
        return cache[key]

    search = TwoStageSearch(T=6, direction="min")
    search.fit(BlackBox(lambda s: compress(s)[1]),
               BlackBox(lambda s: memory_footprint(compress(s)[0], ref).bytes_total),
               baseline_accuracy=result["baseline_accuracy"])
    assert search.s_star_ == result["s_star"]
    assert search.s_acc_ == result["s_acc"]


def test_synthetic_parity(tmp_path):
    cfg = load_config(write_toml(tmp_path / "job.toml", SYNTHETIC))
    assert run_job(cfg, tmp_path / "out") == EXIT_OK
    result = json.loads((tmp_path / "out" / "result.json").read_text())
    seed = stream_seed(3, "search")
    acc = synthetic_curve("logistic", seed=seed)
    search = TwoStageSearch(T=6, direction="max")
    search.fit(acc, synthetic_curve("knee", seed=seed), baseline_accuracy=acc.value(0.0))
    assert (search.s_acc_, search.s_star_) == (result["s_acc"], result["s_star"])


def test_seed_override_changes_streams(tmp_path):
    path = write_toml(tmp_path / "job.toml", SYNTHETIC)
    assert load_config(path).train.seed == stream_seed(3, "train")
    assert load_config(path, seed=9).train.seed == stream_seed(9, "train")
    assert len({stream_seed(0, s) for s in STREAMS}) == len(STREAMS)
    with pytest.raises(ValueError):
        stream_seed(-1, "data")


def test_train_subcommand(tmp_path):
    cfg = write_toml(tmp_path / "job.toml", SYNTHETIC)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    rows = read_csv(tmp_path / "o" / "train_history.csv")
    assert rows[0] == ["epoch", "loss", "train_accuracy", "val_accuracy"] and len(rows) == 3
    load_model(tmp_path / "o" / "reference.json")


def test_compress_at_sweep_is_monotone(tmp_path, blobs_job):
    _, job_out = blobs_job
    text = "\n".join([
        "seed = 0", "[task]", 'dataset = "blobs"', "[model]", 'arch = "mlp"', "hidden = [16]",
        "[scheme]", 'type = "prune"', "[lc]", "outer_iters = 40", "l_step_batches = 20",
    ])
    cfg = write_toml(tmp_path / "job.toml", text)
    out = tmp_path / "profile"
    code = main(["compress-at", "--config", cfg, "--out", str(out), "--sweep", "20",
                 "--workers", "4", "--model", str(job_out / "reference.json")])
    assert code == EXIT_OK
    rows = read_csv(out / "profile.csv")
    assert tuple(rows[0]) == PROFILE_COLUMNS and len(rows) == 21
    acc = [float(r[1]) for r in rows[1:]]
    assert all(b <= a + 0.03 for a, b in zip(acc, acc[1:]))
    lc_vs_dc = [(float(r[1]), float(r[2])) for r in rows[1:]]
    assert all(lc >= dc for lc, dc in lc_vs_dc)
    assert len(list(out.glob("lc_trace_*.csv"))) == 20


def test_compress_at_explicit_sparsities(tmp_path):
    cfg = write_toml(tmp_path / "job.toml", SYNTHETIC)
    out = tmp_path / "p"
    assert main(["compress-at", "--config", cfg, "--out", str(out), "-s", "1.0"]) == EXIT_CONFIG
    assert main(["compress-at", "--config", cfg, "--out", str(out), "-s", "0.5"]) == EXIT_OK
    assert [r[0] for r in read_csv(out / "profile.csv")[1:]] == ["0.5"]


def test_thin_without_zero_structures_is_identity(tmp_path, blobs_job):
    _, job_out = blobs_job
    ref = load_model(job_out / "reference.json")
    masks = tmp_path / "masks.json"
    masks.write_text(json.dumps({"fc0": [1] * 16}))
    out = tmp_path / "thin.json"
    assert main(["thin", "--model", str(job_out / "reference.json"), "--masks", str(masks),
                 "--out", str(out)]) == EXIT_OK
    thinned = load_model(out)
    for k, v in ref.parameters().items():
        assert thinned.parameters()[k].tobytes() == v.tobytes()


def test_thin_removes_masked_neurons(tmp_path, blobs_job, capsys):
    _, job_out = blobs_job
    masks = tmp_path / "masks.json"
    masks.write_text(json.dumps({"fc0": [1, 0] * 8}))
    out = tmp_path / "thin.json"
    assert main(["thin", "--model", str(job_out / "reference.json"), "--masks", str(masks),
                 "--out", str(out)]) == EXIT_OK
    counts = json.loads(capsys.readouterr().out)
    assert counts["parameters_after"] < counts["parameters_before"]
    assert load_model(out).nodes[0].params["weight"].shape == (8, 2)
    masks.write_text(json.dumps({"fc0": [2] * 16}))
    assert main(["thin", "--model", str(job_out / "reference.json"), "--masks", str(masks),
                 "--out", str(out)]) == EXIT_CONFIG


def test_report_on_reference(blobs_job, capsys):
    _, job_out = blobs_job
    assert main(["report", "--model", str(job_out / "reference.json")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["footprint"]["compression_ratio"] == 1.0
    assert rep["flops"]["speedup_ratio"] == 1.0
    assert main(["report", "--model", str(job_out / "compressed.json"),
                 "--reference", str(job_out / "reference.json")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["footprint"]["compression_ratio"] > 1.0


def test_structured_job_writes_thinned_model(tmp_path):
    doc = blobs_doc(scheme={"type": "neuron_prune"}, accuracy="synthetic:knee",
                    objective={"name": "flops_min"})
    cfg = config_from_dict(doc)
    assert run_job(cfg, tmp_path) == EXIT_OK
    thinned = load_model(tmp_path / "thinned.json")
    result = json.loads((tmp_path / "result.json").read_text())
    assert thinned.nodes[0].params["weight"].shape[0] < 16
    assert result["report"]["flops"]["speedup_ratio"] > 1


def test_main_argument_errors(tmp_path, capsys):
    assert main(["search"]) == EXIT_CONFIG
    assert main(["search", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    bad = write_toml(tmp_path / "bad.toml", "seed = [")
    assert main(["train", "--config", bad]) == EXIT_CONFIG
    assert main(["report"]) == EXIT_CONFIG
    assert main(["thin", "--model", "m.json"]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_reproducible_result(tmp_path):
    path = write_toml(tmp_path / "job.toml", SYNTHETIC)
    for name in ("a", "b"):
        assert main(["search", "--config", path, "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("result.json", "search_trace.csv", "compressed.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_save_load_round_trip_preserves_quantized_flags(tmp_path, blobs_job):
    _, job_out = blobs_job
    m = load_model(job_out / "compressed.json")
    assert m.quantized
    save_model(m, tmp_path / "m.json")
    again = load_model(tmp_path / "m.json")
    assert again.quantized == m.quantized
    assert all(np.array_equal(again.parameters()[k], v) for k, v in m.parameters().items())
