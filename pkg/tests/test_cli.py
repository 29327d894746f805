import csv
import json

import jsonschema
import pytest

from ahdmil import cli, datagen

SMALL = dict(q=8, hidden=8, degree=3, k_clu=2, epochs_sd=1, epochs_ad=1, lr_lipn=1e-3)
GEN = ["--bags", "20", "--n-range", "12", "16", "--dim", "8", "--lowres", "vector", "--dim-lo", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert cli.main(["gen", "--out", str(data), "--seed", "7", *GEN]) == 0
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    common = ["--data", str(data), "--config", str(cfg), "--out", str(run)]
    assert cli.main(["train-sd", *common]) == 0
    assert cli.main(["train-ad", *common, "--p", "0"]) == 0
    return root, data, run, cfg


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_gen_twice_identical_digest(tmp_path):
    for sub in ("a", "b"):
        assert cli.main(["gen", "--out", str(tmp_path / sub), "--seed", "7", *GEN]) == 0
    assert datagen.directory_digest(tmp_path / "a") == datagen.directory_digest(tmp_path / "b")


def test_gen_refuses_non_empty_dir(tmp_path):
    (tmp_path / "junk").write_text("x")
    assert cli.main(["gen", "--out", str(tmp_path), *GEN]) == 1
    assert cli.main(["gen", "--out", str(tmp_path), "--force", *GEN]) == 0


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train-sd"])
    assert exc.value.code == 1


def test_missing_manifest_exit_2(tmp_path):
    assert cli.main(["train-sd", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exit_2(workspace, tmp_path):
    _, data, _, _ = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lamda": 0.3}))
    assert cli.main(["train-sd", "--data", str(data), "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_run_directory_contents(workspace):
    _, _, run, _ = workspace
    for name in ("config.json", "seed", "BUILD", "logs/commands.log", "logs/train-sd.jsonl",
                 "logs/train-ad.jsonl", "checkpoints/sd.ahck", "checkpoints/targets.ahtg", "checkpoints/ad.ahck"):
        assert (run / name).exists(), name
    echo = json.loads((run / "config.json").read_text())
    assert echo["alphas"] == [0.7, 0.3, 0.5, 0.5, 2.0] and echo["p"] == 0.0


def test_sd_log_has_every_loss_term(workspace):
    _, _, run, _ = workspace
    rec = read_jsonl(run / "logs" / "train-sd.jsonl")[0]
    for key in ("epoch", "cls", "clu", "dis1", "dis2", "rate", "retention", "val_auc"):
        assert key in rec


def test_ad_log_p_zero_has_no_soft_iterations(workspace):
    _, _, run, _ = workspace
    recs = read_jsonl(run / "logs" / "train-ad.jsonl")
    assert recs and all(r["n_soft"] == 0 and "s" not in r["modes"] for r in recs)


@pytest.mark.parametrize("mode", ["teacher-full", "student-pruned"])
def test_eval_both_modes(workspace, mode):
    _, data, run, _ = workspace
    report = run / "reports" / f"{mode}.json"
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "ad.ahck"),
                     "--mode", mode, "--report", str(report), "--compare"]) == 0
    doc = json.loads(report.read_text())
    jsonschema.validate(doc, cli.REPORT_SCHEMA)
    with open(run / "reports" / f"{mode}.timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == doc["metrics"]["n_samples"] == len(doc["bag_ids"])
    assert list(rows[0]) == list(cli.TIMING_COLUMNS)
    with open(run / "reports" / f"{mode}.calibration.csv") as fh:
        bins = list(csv.DictReader(fh))
    assert list(bins[0]) == list(cli.CALIBRATION_COLUMNS)
    assert sum(int(b["count"]) for b in bins) == doc["metrics"]["n_samples"]


def test_infer_writes_predictions(workspace):
    _, data, run, _ = workspace
    report = run / "reports" / "infer.json"
    assert cli.main(["infer", "--data", str(data), "--ckpt", str(run / "checkpoints" / "ad.ahck"),
                     "--report", str(report)]) == 0
    with open(run / "reports" / "infer.predictions.csv") as fh:
        assert len(list(csv.DictReader(fh))) == json.loads(report.read_text())["metrics"]["n_samples"]


def test_mode_checkpoint_mismatch(workspace):
    _, data, run, _ = workspace
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "sd.ahck"),
                     "--mode", "student-pruned"]) == 1
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "sd.ahck"),
                     "--mode", "teacher-full", "--report", str(run / "reports" / "sd.json")]) == 0


def test_unknown_split(workspace):
    _, data, run, _ = workspace
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(run / "checkpoints" / "ad.ahck"),
                     "--split", "holdout"]) == 1


def test_corrupt_checkpoint_exit_2(workspace, tmp_path):
    _, data, _, _ = workspace
    bad = tmp_path / "x.ahck"
    bad.write_bytes(b"nope")
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(bad)]) == 2


def test_sweep_rows_and_idempotence(workspace, tmp_path):
    _, data, _, cfg = workspace
    out = tmp_path / "sweep"
    args = ["sweep", "--data", str(data), "--config", str(cfg), "--out", str(out),
            "--param", "p", "--values", "0,1", "--seeds", "1"]
    assert cli.main(args) == 0
    path = out / "reports" / "sweep.csv"
    first = path.read_text()
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["param"], r["value"], r["seed"]) for r in rows] == [("p", "0.0", "1"), ("p", "1.0", "1")]
    assert cli.main(args) == 0
    assert path.read_text() == first


def test_sweep_empty_values_rejected(workspace, tmp_path):
    _, data, _, _ = workspace
    assert cli.main(["sweep", "--data", str(data), "--out", str(tmp_path / "s"),
                     "--param", "K", "--values", " , "]) == 1


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip()
