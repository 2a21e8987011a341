import json

import numpy as np
import pytest

from goatlab.cli import RunConfig, inspect_init, load_config, main
from goatlab.errors import ConfigError


def write_cfg(tmp_path, **kw):
    kw.setdefault("output_dir", str(tmp_path / "out"))
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(kw))
    return p


def test_train_outputs_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, seed=1, steps=5, m=16, n=16, E=4, r=4)
    assert main(["train", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert {p.name for p in out.iterdir()} == {"config.json", "metrics.csv", "summary.json", "snapshot"}
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,balance_loss,f1,f2,f3,f4,weight_gap,wall_ms"
    assert len(lines) == 7
    for line in lines[1:]:
        loads = [float(v) for v in line.split(",")[3:7]]
        assert abs(sum(loads) - 1.0) <= 1e-9
    first = (out / "metrics.csv").read_bytes()
    assert main(["train", "--config", str(cfg)]) == 0
    assert (out / "metrics.csv").read_bytes() == first


def test_zero_steps_gap(tmp_path):
    cfg = write_cfg(tmp_path, steps=0, m=16, n=16, E=4, r=4)
    assert main(["train", "--config", str(cfg)]) == 0
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2
    assert float(lines[1].split(",")[-2]) <= 1e-8


def test_seed_env_override(tmp_path):
    cfg = write_cfg(tmp_path, seed=1)
    assert load_config(cfg, env={"GOATLAB_SEED": "42"}).seed == 42
    with pytest.raises(ConfigError):
        load_config(cfg, env={"GOATLAB_SEED": "x"})


def test_config_errors_are_field_level(tmp_path, capsys):
    cfg = write_cfg(tmp_path, lr=-1, variant="Nope", typo=3)
    with pytest.raises(ConfigError) as info:
        load_config(cfg, env={})
    assert info.value.problems == ["typo: unknown key"]
    cfg = write_cfg(tmp_path, lr=-1, variant="Nope", E=3)
    with pytest.raises(ConfigError) as info:
        load_config(cfg, env={})
    names = {p.split(":")[0] for p in info.value.problems}
    assert {"lr", "variant"} <= names
    assert main(["train", "--config", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err


def test_divergence_keeps_partial_metrics(tmp_path):
    cfg = write_cfg(tmp_path, steps=500, lr=50.0, m=16, n=16, E=4, r=4)
    assert main(["train", "--config", str(cfg)]) == 3
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["status"] == "diverged"
    assert (tmp_path / "out" / "metrics.csv").exists()


def test_inspect_init_reports():
    base = dict(m=16, n=16, E=4, r=4)
    z = inspect_init(RunConfig(variant="ZeroMoE", **base).validate())
    assert all(e["ba_norm"] == 0 for e in z["experts"]) and z["residual"] == 0
    g1 = inspect_init(RunConfig(rho=1.0, **base).validate())
    g10 = inspect_init(RunConfig(rho=10.0, **base).validate())
    ratios = [a["ba_norm"] / b["ba_norm"] for a, b in zip(g10["experts"], g1["experts"])]
    assert np.allclose(ratios, 0.1)
    assert g1["residual"] <= 1e-12
    assert [e["start"] for e in g1["experts"]] == [0, 4, 8, 12]


def test_inspect_init_segment_sums(tmp_path, monkeypatch):
    from goatlab import cli

    class Diag:
        w0 = np.diag([8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0])

    monkeypatch.setattr(RunConfig, "make_task", lambda self: Diag())
    info = cli.inspect_init(RunConfig(m=8, n=8, E=4, r=4).validate())
    assert [e["sigma_sum"] for e in info["experts"]] == [8.0, 6.0, 4.0, 2.0]


def test_cost_commands(capsys):
    assert main(["cost", "roberta-large", "moe-lora"]) == 0
    assert "4.50%" in capsys.readouterr().out
    assert main(["cost", "vit-base", "lora-r32"]) == 0
    assert "5.98%" in capsys.readouterr().out
    assert main(["cost", "--table"]) == 0
    assert "llama2-7b,hydralora" in capsys.readouterr().out
    assert main(["cost", "vit-base", "nope"]) == 2
    assert "valid:" in capsys.readouterr().err


def test_verify_cost_suite_reports_each_item(capsys):
    code = main(["verify", "cost"])
    out = capsys.readouterr().out
    assert out.count("[1]") == 21
    assert code == (0 if "FAIL" not in out else 1)


def test_unknown_suite_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["verify", "nothing"])
    assert info.value.code == 2


def test_compare(tmp_path, capsys):
    cfg = write_cfg(tmp_path, steps=20, m=16, n=16, E=4, r=4, eval_size=64)
    assert main(["compare", "--config", str(cfg), "--seeds", "0", "1"]) == 0
    summary = json.loads((tmp_path / "out" / "compare.json").read_text())
    assert set(summary["variants"]) == {"GOAT", "ZeroMoE"}
    assert len(summary["variants"]["GOAT"]["final_eval_losses"]) == 2
