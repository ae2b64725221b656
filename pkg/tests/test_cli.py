import json


from nanohtnet import datagen as D
from nanohtnet.cli import main
from nanohtnet.model import FLAGSHIP, flops_count, param_count

SMALL_MODEL = {"rf": 5, "t_k": 3, "channels": 48, "layers": 1, "heads": 4}


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_flops_command(capsys):
    assert main(["flops"]) == 0
    out = _json_out(capsys)
    assert out["flops"] == flops_count(FLAGSHIP)
    assert out["params"] == param_count(FLAGSHIP)


def test_flops_rejects_bad_config(capsys):
    assert main(["flops", "--config", '{"channels": 50}']) == 2
    assert main(["flops", "--config", "{not json"]) == 2
    assert main(["flops", "--config", "/no/such/file.json"]) == 2


def test_gen_data_and_corruption(tmp_path, capsys):
    path = tmp_path / "d.pseq"
    assert main(["gen-data", "--sequences", "2", "--frames", "20", "--seed", "3", "--out", str(path)]) == 0
    assert len(D.read_dataset(path)) == 2
    assert main(["gen-data", "--config", '{"colour": 1}', "--out", str(path)]) == 2
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_bytes(b"garbage!" * 4)
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(path)]) == 3
    path.write_bytes(path.read_bytes()[:-10])
    assert main(["train", "--data", str(path), "--config", json.dumps({"model": SMALL_MODEL})]) == 3


def test_train_eval_dump(tmp_path, capsys):
    data, run = tmp_path / "d.pseq", tmp_path / "run"
    assert main(["gen-data", "--sequences", "3", "--frames", "20", "--out", str(data)]) == 0
    conf = json.dumps({"model": SMALL_MODEL, "batch_size": 32, "stride": 4})
    assert main(["train", "--data", str(data), "--config", conf, "--epochs", "1", "--out", str(run)]) == 0
    capsys.readouterr()
    assert (run / "train_log.jsonl").exists() and (run / "best.ckpt").exists()
    assert main(["eval", "--checkpoint", str(run / "last.ckpt"), "--data", str(data), "--stride", "4"]) == 0
    rep = _json_out(capsys)
    assert rep["overall"]["p_mpjpe"] <= rep["overall"]["mpjpe"]
    attn = tmp_path / "attn.json"
    assert main(["dump-attn", "--checkpoint", str(run / "last.ckpt"), "--data", str(data),
                 "--out", str(attn)]) == 0
    maps = json.loads(attn.read_text())
    assert any(k.endswith("attention") for k in maps)
    assert main(["bench", "--checkpoint", str(run / "last.ckpt"), "--batch", "1", "2",
                 "--iterations", "2"]) == 0
    assert [r["batch"] for r in _json_out(capsys)["latency"]] == [1, 2]


def test_pretrain_export_rejected_as_full_model(tmp_path, capsys):
    data, out = tmp_path / "d.pseq", tmp_path / "pre"
    assert main(["gen-data", "--sequences", "1", "--frames", "20", "--out", str(data)]) == 0
    conf = {"model": SMALL_MODEL, "pretrain": {"epochs": 1, "slice": 5, "embed_dim": 16, "bank_capacity": 64}}
    assert main(["pretrain", "--data", str(data), "--config", json.dumps(conf), "--out", str(out)]) == 0
    assert main(["eval", "--checkpoint", str(out / "encoder.ckpt"), "--data", str(data)]) == 2
    conf = json.dumps({"model": SMALL_MODEL, "stride": 4})
    assert main(["train", "--data", str(data), "--config", conf, "--epochs", "1",
                 "--pretrained", str(out / "encoder.ckpt"), "--out", str(tmp_path / "ft")]) == 2  # one sequence cannot split


def test_missing_required_file(capsys):
    assert main(["eval", "--checkpoint", "/nope.ckpt", "--data", "/nope.pseq"]) == 2


def test_gen_data_single_action(tmp_path, capsys):
    path = tmp_path / "w.pseq"
    assert main(["gen-data", "--sequences", "3", "--frames", "10", "--config", '{"action": "walk"}',
                 "--out", str(path)]) == 0
    assert {s.tag for s in D.read_dataset(path)} == {"walk"}
    assert main(["gen-data", "--config", '{"action": "dance"}', "--out", str(path)]) == 2
