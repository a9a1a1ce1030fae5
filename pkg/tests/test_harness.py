import json

import numpy as np
import pytest
import torch

from advpt.attacks import bank_attack, eval_attack
from advpt.defenses import DefenseTransform
from advpt.encoders import TokenEmbeddingTable
from advpt.errors import ConfigError, InputError, StageError, VocabularyError
from advpt.harness import (DataConfig, EvaluationReport, RunConfig, Session, domain_shift_eval, emit_report,
                           evaluate_context, format_nearest, format_table, load_config, load_image_folder,
                           load_report, m_sweep, nearest_words, percent, run_pipeline, tradeoff_sweep, write_config)
from advpt.prompts import PromptContext, TuneConfig, encode_prompts, init_context


def small_config(tmp_path=None, **changes) -> RunConfig:
    cfg = RunConfig(
        data=DataConfig(n_train=96, n_test=48),
        bank_attack=bank_attack(iterations=2),
        eval_attack=eval_attack(iterations=3, seed=1_000_000),
        tune=TuneConfig(epochs=3, context_length=4),
        output=str(tmp_path) if tmp_path else None,
    )
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture(scope="module")
def session():
    return Session(small_config())


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.bank_attack.epsilon, cfg.bank_attack.iterations) == (8 / 255, 10)
    assert (cfg.eval_attack.epsilon, cfg.eval_attack.iterations, cfg.eval_attack.seed) == (16 / 255, 40, 1_000_000)
    assert (cfg.tune.context_length, cfg.tune.lr, cfg.tune.batch_size, cfg.tune.epochs) == (32, 0.005, 32, 100)


def test_config_round_trip_and_hash(tmp_path):
    cfg = small_config(tmp_path, defenses=(DefenseTransform(), DefenseTransform("rescale")))
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    write_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert len(cfg.config_hash()) == 16
    assert cfg.replace(seed=1).config_hash() != cfg.config_hash()
    (tmp_path / "c.json").write_text(json.dumps({"bank_attack": {"epsilon": "4/255"}, "tune": {"epochs": 2}}))
    j = load_config(tmp_path / "c.json")
    assert j.bank_attack.epsilon == pytest.approx(4 / 255) and j.tune.epochs == 2


def test_bad_configs(tmp_path):
    bad = {
        "unknown.yaml": "tuning: {epochs: 3}\n",
        "key.yaml": "tune: {epoch: 3}\n",
        "value.yaml": "tune: {epochs: -1}\n",
        "list.yaml": "- 1\n- 2\n",
        "syntax.yaml": "tune: {epochs: [\n",
        "style.yaml": "data: {style: cartoon}\n",
        "defense.yaml": "defenses: [{kind: rescale, scale_low: 2.0, scale_high: 1.0}]\n",
    }
    for name, text in bad.items():
        (tmp_path / name).write_text(text)
        with pytest.raises(ConfigError):
            load_config(tmp_path / name)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "empty.yaml").write_text("")
    assert load_config(tmp_path / "empty.yaml") == RunConfig()


def test_report_formatting(tmp_path):
    r = EvaluationReport(metadata={"config_hash": "abc", "theta_sha256": "f" * 64, "wall_time": 1.0})
    r.add(dataset="synthetic", prompt_kind="fixed", attack="PGD-40", defense="none", clean_acc=0.9, robust_acc=0.374)
    r.add(dataset="synthetic", prompt_kind="advpt", attack="PGD-40", defense="none", clean_acc=0.9, robust_acc=0.5)
    r.add(dataset="synthetic-sketch", prompt_kind="advpt", attack="PGD-40", defense="none", clean_acc=0.5,
          robust_acc=0.25)
    assert percent(0.374) == "37.4" and percent(None) == "-"
    table = format_table(r)
    lines = table.splitlines()
    assert lines[0].split() == ["prompt", "defense", "metric", "synthetic", "synthetic-sketch"]
    body = [l.split() for l in lines[2:6]]
    assert body == [["fixed", "none", "clean", "90.0", "-"], ["fixed", "none", "PGD-40", "37.4", "-"],
                    ["advpt", "none", "clean", "90.0", "50.0"], ["advpt", "none", "PGD-40", "50.0", "25.0"]]
    emit_report(r, tmp_path / "r.json", "json")
    assert load_report(tmp_path / "r.json") == r
    emit_report(r, tmp_path / "r.txt", "table")
    assert (tmp_path / "r.txt").read_text() == table
    with pytest.raises(ConfigError):
        emit_report(r, tmp_path / "r.csv", "csv")
    with pytest.raises(InputError):
        load_report(tmp_path / "r.txt")


def test_report_row_validation():
    r = EvaluationReport()
    with pytest.raises(ValueError):
        r.add(prompt_kind="x", clean_acc=1.2, robust_acc=0.1)
    with pytest.warns(UserWarning, match="exceeds"):
        r.add(dataset="d", prompt_kind="x", clean_acc=0.2, robust_acc=0.3)
    assert r.find(prompt_kind="x")["robust_acc"] == 0.3
    with pytest.raises(KeyError):
        r.find(prompt_kind="y")


def test_nearest_words_linear_scan():
    table = TokenEmbeddingTable(["cat", "dog", "sun"], torch.tensor([[0.0, 0.0], [3.0, 4.0], [1.0, 0.0]]))
    V = torch.tensor([[3.0, 4.0], [0.5, 0.0], [1.0, 1.0]])
    got = nearest_words(V, table, top_n=3)
    for row, v in zip(got, V):
        dists = [float(np.linalg.norm(table.embeddings[i].numpy() - v.numpy())) for i in range(3)]
        want = sorted(zip(table.vocab, dists), key=lambda t: t[1])
        assert [w for w, _ in row] == [w for w, _ in want]
        assert [d for _, d in row] == pytest.approx([d for _, d in want])
    assert got[0][0] == ("dog", 0.0)
    # exact tie between cat and sun resolves by vocab order
    assert [w for w, _ in got[1][:2]] == ["cat", "sun"]
    assert format_nearest(nearest_words(V[:1], table, 2)) == "v1: dog(0.0000) sun(4.4721)\n"
    with pytest.raises(InputError):
        nearest_words(torch.zeros(1, 3), table)


def test_nearest_words_recovers_planted_tokens(mini):
    V = mini.table.embeddings[[5, 17, 42]].clone()
    got = nearest_words(V, mini.table, top_n=1)
    assert [row[0][0] for row in got] == [mini.table.vocab[i] for i in (5, 17, 42)]
    assert all(row[0][1] == 0.0 for row in got)


def test_pipeline_outputs(tmp_path):
    cfg = small_config(tmp_path)
    report = run_pipeline(cfg)
    kinds = [(r["prompt_kind"], r["defense"]) for r in report.rows]
    assert kinds == [("fixed", "none"), ("advpt", "none")]
    for name in ("bank.bin", "context.bin", "config.yaml", "report.json", "report.txt"):
        assert (tmp_path / name).exists()
    assert load_report(tmp_path / "report.json") == report
    assert len(report.metadata["loss_trace"]) == 3
    assert report.metadata["complete"] and report.metadata["config_hash"] == cfg.config_hash()
    assert set(report.metadata["timings"]) >= {"load", "bank", "tune", "evaluate"}
    assert isinstance(report.artifacts["context.bin"], PromptContext)


def test_pipeline_zero_epochs_keeps_init(session):
    cfg = session.config.replace(tune=TuneConfig(epochs=0, context_length=4))
    s = Session(cfg)
    report = run_pipeline(cfg, write=False, session=s)
    ctx = report.artifacts["context.bin"]
    assert torch.equal(ctx.V, init_context(s.table, s.class_names, 4, cfg.seed).V)
    assert report.metadata["loss_trace"] == []


def test_evaluate_context_matches_pipeline(session):
    report = run_pipeline(session.config, write=False, session=session)
    again = evaluate_context(session.config, report.artifacts["context.bin"], write=False, session=session)
    assert again.rows == report.rows


def test_tradeoff_with_zero_epsilon(session):
    cfg = session.config.replace(bank_attack=bank_attack(epsilon=0.0, iterations=2))
    s = Session(cfg)
    report = tradeoff_sweep(cfg, write=False, session=s)
    adv, clean = report.find(prompt_kind="advpt"), report.find(prompt_kind="clean_tune")
    assert (adv["clean_acc"], adv["robust_acc"]) == (clean["clean_acc"], clean["robust_acc"])
    assert torch.equal(s.bank().embeddings, s.clean_bank().embeddings)


def test_m_sweep_deduplicates(session):
    with pytest.warns(UserWarning, match="duplicate"):
        report = m_sweep(session.config, [2, 2], write=False, session=session)
    assert [r["M"] for r in report.rows] == [2]
    with pytest.raises(ConfigError):
        m_sweep(session.config, [0], write=False, session=session)


def test_domain_shift(session):
    ctx, _ = session.tune(session.bank())
    base = EvaluationReport()
    with torch.no_grad():
        session.evaluate(base, "advpt", encode_prompts(ctx, session.pair))
    same = domain_shift_eval(session, ctx, ["standard"])
    assert same.find(prompt_kind="advpt")["robust_acc"] == base.rows[0]["robust_acc"]
    assert same.find(prompt_kind="advpt")["clean_acc"] == base.rows[0]["clean_acc"]
    shifted = domain_shift_eval(session, ctx, ["jitter", "sketch"])
    assert {r["dataset"] for r in shifted.rows} == {"synthetic-jitter", "synthetic-sketch"}
    with pytest.raises(ConfigError):
        domain_shift_eval(session, ctx, ["cartoon"])
    odd = PromptContext(ctx.V, ["zyzzyva bar"] + ctx.class_names[1:], ctx.class_tokens)
    with pytest.raises(VocabularyError):
        domain_shift_eval(session, odd, ["standard"])


def test_failed_stage_marks_incomplete(tmp_path, monkeypatch):
    from advpt import harness

    def boom(*a, **k):
        raise InputError("no data")

    monkeypatch.setattr(harness, "build_bank", boom)
    cfg = small_config(tmp_path)
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "bank" and exc.value.exit_code == InputError.exit_code
    status = json.loads((tmp_path / "report.incomplete.json").read_text())
    assert status["complete"] is False and status["stage"] == "bank"
    assert not (tmp_path / "report.json").exists()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ADVPT_OUTPUT_DIR", str(tmp_path / "env"))
    assert small_config().output_dir() == tmp_path / "env"
    assert small_config(tmp_path / "explicit").output_dir() == tmp_path / "explicit"


def test_image_folder_ingest(tmp_path, mini):
    from PIL import Image

    rng = np.random.default_rng(0)
    for cls in ("red_bar", "blue_column"):
        (tmp_path / cls).mkdir()
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, (20, 24, 3), dtype=np.uint8)).save(tmp_path / cls / f"{i}.png")
    (tmp_path / "red_bar" / "notes.txt").write_text("skip me")
    d = load_image_folder(tmp_path, 16)
    assert d.class_names == ["blue column", "red bar"]
    assert d.images.shape == (6, 3, 16, 16) and d.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert 0 <= d.images.min() and d.images.max() <= 1
    with pytest.raises(InputError):
        load_image_folder(tmp_path / "nope", 16)
    with pytest.raises(ConfigError):
        DataConfig(train_dir=str(tmp_path))


def test_config_hash_ignores_output_location(tmp_path):
    assert small_config(tmp_path / "a").config_hash() == small_config(tmp_path / "b").config_hash()
