import csv
import json
import shutil
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy.special import softmax

from _oracles import entropy_oracle
from ledd import cli
from ledd import config as C
from ledd.distributions import DiagLaplaceParams, RngStream, sample
from ledd.ensembles import member_step_logits
from ledd.evalkit import auroc, read_score_csv
from ledd.nncore import decode
from ledd.seqtask import read_parallel, write_parallel, write_token_lines
from ledd import experiments as X

SEQ_STAGES = ("train-ensemble", "distill", "detect", "augmented", "analyze")


def tiny_seq(out, **overrides) -> dict:
    raw = {
        "seed": 1,
        "out": str(out),
        "task": {"kind": "seq", "seq": {"vocab_size": 24, "n_held_out": 6, "max_len": 6, "train_count": 200, "test_count": 30}},
        "model": {"emb_dim": 8, "hid_dim": 16},
        "ensemble": {"members": 3, "steps": 30, "batch_size": 32},
        "distill": {"families": ["kd", "edd-dirichlet", "ledd-laplace", "ledd-gaussian"], "steps": 20, "batch_size": 32},
        "eval": {"ood_count": 30, "samples": 16, "beam": 2, "shifts": [{"kind": "length-shift", "magnitude": 2.0}]},
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw[section] = {**raw.get(section, {}), **values}
        else:
            raw[section] = values
    return raw


def write_config(path: Path, raw: dict) -> Path:
    path.write_text(yaml.safe_dump(raw))
    return path


def run(command, config, *extra) -> int:
    return cli.main([command, "--config", str(config), *extra])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(out, command) -> dict:
    return json.loads((Path(out) / f"manifest-{command}.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("seq")
    out = root / "run"
    cfg_path = write_config(root / "cfg.yaml", tiny_seq(out))
    codes = {stage: run(stage, cfg_path) for stage in SEQ_STAGES}
    return root, out, cfg_path, codes


def clone(pipeline, tmp_path) -> tuple[Path, Path]:
    """Copy of the pipeline outputs with a config pointing at the copy."""
    root, out, cfg_path, _ = pipeline
    new_out = tmp_path / "run"
    shutil.copytree(out, new_out)
    raw = yaml.safe_load(cfg_path.read_text())
    raw["out"] = str(new_out)
    return new_out, write_config(tmp_path / "cfg.yaml", raw)


class TestPipeline:
    def test_all_stages_succeed(self, pipeline):
        assert pipeline[3] == {stage: 0 for stage in SEQ_STAGES}

    def test_manifest_lists_existing_artifacts(self, pipeline):
        out = pipeline[1]
        from ledd._io import file_sha256

        for stage in SEQ_STAGES:
            body = manifest(out, stage)
            assert body["command"] == stage and body["seed"] == 1
            assert body["artifacts"]
            for rel, digest in body["artifacts"].items():
                assert file_sha256(out / rel) == digest

    def test_manifest_hash_is_config_hash(self, pipeline):
        cfg = C.load(pipeline[2])
        assert manifest(pipeline[1], "distill")["config_hash"] == C.config_hash(cfg)

    def test_member_count(self, pipeline):
        assert len(list((pipeline[1] / "members").glob("member_*.ckpt"))) == 3

    def test_curve_columns_sum_to_total(self, pipeline):
        for fam in ("kd", "edd-dirichlet", "ledd-laplace", "ledd-gaussian"):
            rows = read_rows(pipeline[1] / "students" / f"{fam}_curve.csv")
            assert len(rows) == 20
            assert list(rows[0]) == list(cli.CURVE_COLUMNS)
            for r in rows:
                assert abs(float(r["weighted_kd"]) + float(r["weighted_edd"]) - float(r["total"])) <= 1e-6

    def test_report_matches_dumped_scores(self, pipeline):
        for prefix in ("detect", "augmented"):
            for r in read_rows(pipeline[1] / prefix / "summary.csv"):
                id_s, ood_s = read_score_csv(pipeline[1] / prefix / "scores" / f"{r['model']}_{r['measure']}_{r['ood']}.csv")
                assert float(r["auroc"]) == auroc(id_s, ood_s)

    def test_kd_has_no_knowledge_column(self, pipeline):
        rows = read_rows(pipeline[1] / "detect" / "summary.csv")
        assert {r["measure"] for r in rows if r["model"] == "kd"} == {"TU"}
        assert {r["measure"] for r in rows if r["model"] == "ledd-laplace"} == {"TU", "KU"}
        assert not list((pipeline[1] / "detect" / "scores").glob("kd_KU_*"))

    def test_detect_report_rows(self, pipeline):
        rows = read_rows(pipeline[1] / "detect" / "summary.csv")
        # ensemble and three distribution students give TU and KU; KD gives TU only
        assert len(rows) == 2 * 4 + 1
        assert all(0.0 <= float(r["auroc"]) <= 1.0 for r in rows)

    def test_analyze_pcc_matches_sequences(self, pipeline):
        from ledd.evalkit import pearson

        seqs = read_rows(pipeline[1] / "detect" / "sequences.csv")
        rows = {(r["source"], r["model"]): r for r in read_rows(pipeline[1] / "analyze" / "pcc.csv")}
        mine = [r for r in seqs if r["model"] == "ensemble"]
        expected = pearson([float(r["length"]) for r in mine], [float(r["tu"]) for r in mine])
        assert float(rows[("detect", "ensemble")]["pcc_length_tu"]) == expected
        assert int(rows[("detect", "ensemble")]["n"]) == 60

    def test_augmented_hand_chained(self, pipeline):
        out, cfg_path = pipeline[1], pipeline[2]
        cfg = C.load(cfg_path)
        members = cli._load_members(cfg)
        srcs = [s for s, _ in read_parallel(out / "data" / "test")][:10]
        rows = [r for r in read_rows(out / "augmented" / "sequences.csv") if r["model"] == "augmented" and r["set"] == "id"]
        rng = RngStream(C.derive_seed(cfg.seed, "augmented"))
        for i, src in enumerate(srcs):
            hyp = decode(members, src, beam=cfg.eval.beam, length_penalty=cfg.eval.length_penalty).tokens
            z = member_step_logits(members, src, hyp)  # [L, M, K]
            mu = np.median(z, axis=1)
            sigma = np.maximum(np.abs(z - mu[:, None]).mean(axis=1), 1e-6)
            draws = sample(DiagLaplaceParams(mu, sigma), cfg.eval.samples, X.source_stream(rng, src))
            probs = softmax(draws, axis=-1)  # [S, L, K]
            tu_steps, ku_steps = [], []
            for step in range(probs.shape[1]):
                tu = entropy_oracle(probs[:, step].mean(0))
                tu_steps.append(tu)
                ku_steps.append(tu - np.mean([entropy_oracle(p) for p in probs[:, step]]))
            assert int(rows[i]["length"]) == len(hyp)
            assert float(rows[i]["tu"]) == pytest.approx(np.mean(tu_steps), abs=1e-9)
            assert float(rows[i]["ku"]) == pytest.approx(np.mean(ku_steps), abs=1e-9)


class TestDeterminism:
    def test_rerun_reproduces_every_checksum(self, pipeline, tmp_path):
        out = tmp_path / "again"
        cfg_path = write_config(tmp_path / "cfg.yaml", tiny_seq(out))
        for stage in SEQ_STAGES:
            assert run(stage, cfg_path) == 0
            assert manifest(out, stage)["artifacts"] == manifest(pipeline[1], stage)["artifacts"], stage

    def test_seed_override_changes_outputs(self, pipeline, tmp_path):
        out = tmp_path / "other"
        assert run("train-ensemble", pipeline[2], "--seed", "2", "--out", str(out)) == 0
        a = manifest(out, "train-ensemble")
        b = manifest(pipeline[1], "train-ensemble")
        assert a["seed"] == 2 and a["config_hash"] != b["config_hash"]
        assert a["artifacts"]["members/member_00.ckpt"] != b["artifacts"]["members/member_00.ckpt"]


class TestDetectChecks:
    def test_identical_id_and_ood(self, pipeline, tmp_path):
        out, cfg_path = clone(pipeline, tmp_path)
        ids = [s for s, _ in read_parallel(out / "data" / "test")]
        write_token_lines(out / "data" / "ood_length-shift-2.src", ids)
        assert run("detect", cfg_path) == 0
        rows = read_rows(out / "detect" / "summary.csv")
        assert len(rows) == 9
        for r in rows:
            assert abs(float(r["auroc"]) - 0.5) <= 0.02, r

    def test_beta_zero_distill_equals_kd(self, pipeline, tmp_path):
        out, cfg_path = clone(pipeline, tmp_path)
        raw = yaml.safe_load(cfg_path.read_text())
        raw["distill"].update(families=["kd", "ledd-laplace"], beta=0.0)
        write_config(cfg_path, raw)
        assert run("distill", cfg_path) == 0
        kd = read_rows(out / "students" / "kd_curve.csv")
        ledd = read_rows(out / "students" / "ledd-laplace_curve.csv")
        for a, b in zip(kd, ledd):
            assert float(a["total"]) == pytest.approx(float(b["total"]), abs=1e-7)


class TestAugmentedChecks:
    def test_identical_members(self, pipeline, tmp_path):
        out, cfg_path = clone(pipeline, tmp_path)
        raw = yaml.safe_load(cfg_path.read_text())
        # 400 + 400 sequences put the null AUROC standard deviation near 0.02
        raw["eval"]["ood_count"] = 400
        raw["task"]["seq"]["test_count"] = 400
        write_config(cfg_path, raw)
        cfg = C.load(cfg_path)
        write_parallel(out / "data" / "test", X.test_pairs(cfg))
        for name, srcs in X.ood_sources(cfg).items():
            write_token_lines(out / "data" / f"ood_{name}.src", srcs)
        for p in (out / "members").glob("member_*.ckpt"):
            if p.name != "member_00.ckpt":
                shutil.copyfile(out / "members" / "member_00.ckpt", p)
        assert run("augmented", cfg_path) == 0
        ku = {r["model"]: float(r["auroc"]) for r in read_rows(out / "augmented" / "summary.csv") if r["measure"] == "KU"}
        assert ku["ensemble"] == 0.5
        assert abs(ku["augmented"] - 0.5) <= 0.03
        seqs = read_rows(out / "augmented" / "sequences.csv")
        assert max(float(r["ku"]) for r in seqs if r["model"] == "augmented") < 1e-9

    def test_needs_two_members(self, pipeline, tmp_path):
        out, cfg_path = clone(pipeline, tmp_path)
        for p in (out / "members").glob("member_*.ckpt"):
            if p.name != "member_00.ckpt":
                p.unlink()
        assert run("augmented", cfg_path) == cli.EXIT_CONFIG


class TestEnsembleLayouts:
    def test_single_member(self, tmp_path):
        cfg_path = write_config(tmp_path / "c.yaml", tiny_seq(tmp_path / "run", ensemble={"members": 1, "steps": 5}))
        assert run("train-ensemble", cfg_path) == 0
        assert [p.name for p in (tmp_path / "run" / "members").iterdir()] == ["member_00.ckpt"]

    def test_snapshot_one_checkpoint_per_cycle(self, tmp_path):
        ens = {"kind": "snapshot", "members": 3, "steps": 10, "period": 4, "eta_min": 1e-4, "eta_max": 1e-3}
        cfg_path = write_config(tmp_path / "c.yaml", tiny_seq(tmp_path / "run", ensemble=ens))
        assert run("train-ensemble", cfg_path) == 0
        ckpts = sorted(p.name for p in (tmp_path / "run" / "members").iterdir())
        assert ckpts == ["member_00.ckpt", "member_01.ckpt", "member_02.ckpt"]
        trace = read_rows(tmp_path / "run" / "lr_trace.csv")
        assert len(trace) == 3 * 4
        assert max(float(r["lr"]) for r in trace) == pytest.approx(1e-3)

    def test_rerun_replaces_stale_members(self, tmp_path):
        out = tmp_path / "run"
        assert run("train-ensemble", write_config(tmp_path / "a.yaml", tiny_seq(out, ensemble={"members": 3, "steps": 2}))) == 0
        assert run("train-ensemble", write_config(tmp_path / "b.yaml", tiny_seq(out, ensemble={"members": 2, "steps": 2}))) == 0
        assert len(list((out / "members").iterdir())) == 2


class TestExitCodes:
    def test_invalid_config(self, tmp_path, capsys):
        raw = tiny_seq(tmp_path / "run", distill={"lam": 3.0, "temperature": -1.0})
        assert run("train-ensemble", write_config(tmp_path / "c.yaml", raw)) == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "distill.lam" in err and "distill.temperature" in err

    def test_missing_config_file(self, tmp_path):
        assert run("train-ensemble", tmp_path / "absent.yaml") == cli.EXIT_CONFIG

    def test_missing_teacher(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "c.yaml", tiny_seq(tmp_path / "run"))
        assert run("distill", cfg_path) == cli.EXIT_IO
        assert "training data missing" in capsys.readouterr().err

    def test_missing_members(self, pipeline, tmp_path, capsys):
        out, cfg_path = clone(pipeline, tmp_path)
        shutil.rmtree(out / "members")
        assert run("detect", cfg_path) == cli.EXIT_IO
        assert "run train-ensemble first" in capsys.readouterr().err

    def test_missing_student(self, pipeline, tmp_path, capsys):
        out, cfg_path = clone(pipeline, tmp_path)
        (out / "students" / "kd.ckpt").unlink()
        assert run("detect", cfg_path) == cli.EXIT_IO
        assert "run distill first" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, pipeline, tmp_path):
        out, cfg_path = clone(pipeline, tmp_path)
        p = out / "members" / "member_01.ckpt"
        data = bytearray(p.read_bytes())
        data[-3] ^= 0xFF
        p.write_bytes(bytes(data))
        assert run("detect", cfg_path) == cli.EXIT_IO

    def test_corrupt_teacher_cache(self, pipeline, tmp_path):
        out, cfg_path = clone(pipeline, tmp_path)
        (out / "teacher.eddl").write_bytes(b"garbage")
        raw = yaml.safe_load(cfg_path.read_text())
        raw["distill"]["init_from_teacher"] = False
        write_config(cfg_path, raw)
        assert run("distill", cfg_path) == cli.EXIT_IO

    def test_analyze_without_scores(self, tmp_path):
        assert run("analyze", write_config(tmp_path / "c.yaml", tiny_seq(tmp_path / "run"))) == cli.EXIT_IO

    def test_detect_needs_sequence_task(self, tmp_path):
        raw = tiny_seq(tmp_path / "run", task={"kind": "toy"})
        assert run("detect", write_config(tmp_path / "c.yaml", raw)) == cli.EXIT_CONFIG

    def test_divergence(self, pipeline, tmp_path, capsys):
        out, cfg_path = clone(pipeline, tmp_path)
        raw = yaml.safe_load(cfg_path.read_text())
        raw["distill"].update(families=["edd-dirichlet"], schedule={"kind": "constant", "eta_max": 1e12}, init_from_teacher=False)
        write_config(cfg_path, raw)
        shutil.rmtree(out / "students")
        assert run("distill", cfg_path) == cli.EXIT_DIVERGED
        div = read_rows(out / "students" / "edd-dirichlet_divergence.csv")
        assert len(div) == 1 and int(div[0]["step"]) >= 1 and div[0]["term"]
        assert not (out / "students" / "edd-dirichlet.ckpt").exists()
        assert div[0]["term"] in capsys.readouterr().err


def tiny_toy(out) -> dict:
    return {
        "seed": 0,
        "out": str(out),
        "task": {"kind": "toy", "toy": {"per_class": 40}},
        "model": {"hidden": [8]},
        "ensemble": {"members": 2, "steps": 20, "batch_size": 30},
        "distill": {"families": ["kd", "edd-dirichlet", "ledd-laplace"], "steps": 20, "batch_size": 30, "init_from_teacher": False},
        "eval": {"resolution": 12},
    }


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg_path = write_config(root / "c.yaml", tiny_toy(root / "run"))
    assert run("toy", cfg_path) == 0
    return root / "run"


class TestToy:
    def test_method_directories(self, toy_run):
        dirs = sorted(p.name for p in (toy_run / "toy").iterdir() if p.is_dir())
        assert dirs == ["edd-dirichlet", "ensemble", "kd", "ledd-laplace"]

    def test_svgs_are_xml(self, toy_run):
        svgs = list((toy_run / "toy").rglob("*.svg"))
        assert len(svgs) >= 1 + 2 * 3
        for p in svgs:
            assert ET.parse(p).getroot().tag.endswith("svg")

    def test_grid_csv(self, toy_run):
        rows = read_rows(toy_run / "toy" / "ensemble" / "grid.csv")
        assert len(rows) == 144
        assert all(1 / 3 - 1e-9 <= float(r["confidence"]) <= 1 for r in rows)

    def test_summary(self, toy_run):
        rows = {r["method"]: r for r in read_rows(toy_run / "toy" / "summary.csv")}
        assert set(rows) == {"ensemble", "kd", "edd-dirichlet", "ledd-laplace"}
        assert rows["ensemble"]["confidence_pcc"] == "nan"
        assert -1 <= float(rows["kd"]["confidence_pcc"]) <= 1

    def test_rerun_matches(self, toy_run, tmp_path):
        cfg_path = write_config(tmp_path / "c.yaml", tiny_toy(tmp_path / "run"))
        assert run("toy", cfg_path) == 0
        a = read_rows(toy_run / "toy" / "ensemble" / "grid.csv")
        b = read_rows(tmp_path / "run" / "toy" / "ensemble" / "grid.csv")
        conf_a = np.array([float(r["confidence"]) for r in a])
        conf_b = np.array([float(r["confidence"]) for r in b])
        np.testing.assert_array_equal(conf_a, conf_b)
        assert manifest(toy_run, "toy")["artifacts"] == manifest(tmp_path / "run", "toy")["artifacts"]


def test_parser_lists_every_subcommand():
    text = cli.build_parser().format_help()
    for name in ("train-ensemble", "distill", "detect", "toy", "augmented", "analyze"):
        assert name in text


def test_load_config_overrides(tmp_path):
    cfg_path = write_config(tmp_path / "c.yaml", tiny_seq(tmp_path / "run"))
    cfg = cli.load_config(cfg_path, seed=7, out=str(tmp_path / "x"))
    assert cfg.seed == 7 and cfg.out == str(tmp_path / "x")
    with pytest.raises(C.ConfigError):
        cli.load_config(cfg_path, seed=-3)
