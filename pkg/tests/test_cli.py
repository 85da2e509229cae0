"""CLI tests: the full command chain, run manifests, rerun fidelity, and the
typed exit codes."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from locret.cli import (EXIT_BACKEND, EXIT_ERROR, EXIT_FORMAT,
                        EXIT_MISSING_FILE, EXIT_OK, EXIT_USAGE, main)
from locret.model import load_checkpoint


def run_cli(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "locret.cli", *map(str, args)],
                          capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(
            f"locret {' '.join(map(str, args))} failed ({proc.returncode}):\n"
            f"{proc.stdout}\n{proc.stderr}")
    return proc


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen -> train stage 1 -> train stage 2 -> eval-retrieval, via subprocesses."""
    base = tmp_path_factory.mktemp("chain")
    gen = base / "gen"
    run_cli("gen", "--out", gen, "--n-train", 36, "--n-test", 14,
            "--normal-fraction", 0.25, "--seed", 3, "--split-seed", 4)
    train_corpus = gen / "outputs" / "train.jsonl"
    test_corpus = gen / "outputs" / "test.jsonl"

    s1 = base / "s1"
    run_cli("train", "--out", s1, "--corpus", train_corpus, "--stage", 1,
            "--epochs", 1, "--batch-size", 8, "--seed", 0)
    ckpt1 = s1 / "outputs" / "checkpoint.pt"

    s2 = base / "s2"
    run_cli("train", "--out", s2, "--corpus", train_corpus, "--stage", 2,
            "--epochs", 1, "--batch-size", 8, "--seed", 0,
            "--init-checkpoint", ckpt1)
    ckpt2 = s2 / "outputs" / "checkpoint.pt"

    ret = base / "ret"
    run_cli("eval-retrieval", "--out", ret, "--corpus", test_corpus,
            "--checkpoint", ckpt2, "--level", "both")
    return {"base": base, "gen": gen, "s1": s1, "s2": s2, "ret": ret,
            "train_corpus": train_corpus, "test_corpus": test_corpus,
            "ckpt1": ckpt1, "ckpt2": ckpt2}


class TestChain:
    def test_gen_writes_split_and_summary(self, chain):
        summary = json.loads((chain["gen"] / "outputs" / "gen_summary.json").read_text())
        assert summary["n_train"] == 36 and summary["n_test"] == 14
        assert chain["train_corpus"].exists() and chain["test_corpus"].exists()
        assert (chain["gen"] / "config.json").exists()

    def test_train_outputs(self, chain):
        report = json.loads((chain["s1"] / "outputs" / "train_report.json").read_text())
        assert report["stage"] == 1
        assert report["steps_per_epoch"] == 5  # 4 full batches + one of size 4
        log_lines = (chain["s1"] / "outputs" / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == report["steps_per_epoch"] * report["epochs"]
        model = load_checkpoint(chain["ckpt1"])
        assert model.config.vocab_size > 0

    def test_stage2_report(self, chain):
        report = json.loads((chain["s2"] / "outputs" / "train_report.json").read_text())
        assert report["stage"] == 2
        assert chain["ckpt2"].exists()

    def test_retrieval_payload(self, chain):
        payload = json.loads((chain["ret"] / "outputs" / "retrieval.json").read_text())
        assert set(payload) == {"region", "global"}
        for level in ("region", "global"):
            block = payload[level]
            assert set(block["rank_at_k_precision"]) == {"1", "5", "10"}
            assert 0.0 <= block["map"] <= 100.0

    def test_manifest_records_verifying_hashes(self, chain):
        manifest = json.loads((chain["ret"] / "manifest.json").read_text())
        assert manifest["command"] == "eval-retrieval"
        assert "--checkpoint" in manifest["argv"]
        for path, digest in manifest["inputs"].items():
            assert sha256(Path(path)) == digest
        for rel, digest in manifest["outputs"].items():
            assert sha256(chain["ret"] / rel) == digest
        assert manifest["outputs"], "outputs section must not be empty"
        assert manifest["duration_seconds"] >= 0

    def test_rerun_reproduces_metrics_byte_identically(self, chain):
        redo = chain["base"] / "ret_redo"
        proc = run_cli("rerun", "--manifest", chain["ret"] / "manifest.json",
                       "--out", redo)
        assert "re-running" in proc.stdout
        original = (chain["ret"] / "outputs" / "retrieval.json").read_bytes()
        replayed = (redo / "outputs" / "retrieval.json").read_bytes()
        assert replayed == original

    def test_rerun_rejects_tampered_inputs(self, chain):
        corpus2 = chain["base"] / "corpus2.jsonl"
        corpus2.write_bytes(chain["test_corpus"].read_bytes())
        ret2 = chain["base"] / "ret2"
        run_cli("eval-retrieval", "--out", ret2, "--corpus", corpus2,
                "--checkpoint", chain["ckpt2"], "--level", "region")
        with open(corpus2, "ab") as fh:
            fh.write(b"\n")
        proc = run_cli("rerun", "--manifest", ret2 / "manifest.json",
                       "--out", chain["base"] / "ret2_redo", check=False)
        assert proc.returncode == EXIT_ERROR
        assert "changed" in proc.stderr

    def test_grounding_eval_and_heatmaps(self, chain, tmp_path):
        out = tmp_path / "ground"
        run_cli("eval-grounding", "--out", out, "--corpus", chain["test_corpus"],
                "--checkpoint", chain["ckpt2"], "--seeds", "0,1", "--heatmaps", 1)
        payload = json.loads((out / "outputs" / "grounding.json").read_text())
        assert payload["seeds"] == [0, 1]
        assert payload["miou_std"] == 0.0
        assert 0.0 <= payload["miou"] <= 1.0
        assert payload["baseline_miou"] > 0.0
        records = (out / "outputs" / "grounding_records.jsonl").read_text().splitlines()
        assert len(records) == payload["n_maps"]
        pngs = list((out / "outputs").glob("heatmap_*.png"))
        npys = list((out / "outputs").glob("heatmap_*.npy"))
        assert pngs and len(pngs) == len(npys)

    def test_query_by_sample_id_with_thumbnails(self, chain, tmp_path):
        sample_id = json.loads(
            chain["test_corpus"].read_text().splitlines()[1])["id"]
        out = tmp_path / "query"
        proc = run_cli("query", "--out", out, "--corpus", chain["test_corpus"],
                       "--checkpoint", chain["ckpt2"], "--image", sample_id,
                       "--region", "left-upper", "--disease", "nodule",
                       "--k", 5, "--thumbnails")
        gallery = json.loads((out / "outputs" / "gallery.json").read_text())
        assert gallery["k"] == 5 and len(gallery["results"]) == 5
        ranks = [r["rank"] for r in gallery["results"]]
        assert ranks == [1, 2, 3, 4, 5]
        scores = [r["score"] for r in gallery["results"]]
        assert all(a >= b - 1e-12 for a, b in zip(scores, scores[1:]))
        thumbs = list((out / "outputs").glob("rank*.png"))
        assert len(thumbs) == 5
        assert "#" in proc.stdout

    def test_query_from_image_file(self, chain, tmp_path):
        from locret.corpus import load_corpus

        image = load_corpus(chain["test_corpus"])[1].image
        npy = tmp_path / "probe.npy"
        np.save(npy, image)
        out = tmp_path / "query_file"
        run_cli("query", "--out", out, "--corpus", chain["test_corpus"],
                "--checkpoint", chain["ckpt2"], "--image", npy,
                "--region", "right-lower", "--k", 3)
        gallery = json.loads((out / "outputs" / "gallery.json").read_text())
        assert len(gallery["results"]) == 3

    def test_query_oversized_k_warns_and_truncates(self, chain, tmp_path):
        sample_id = json.loads(
            chain["test_corpus"].read_text().splitlines()[1])["id"]
        out = tmp_path / "query_big"
        proc = run_cli("query", "--out", out, "--corpus", chain["test_corpus"],
                       "--checkpoint", chain["ckpt2"], "--image", sample_id,
                       "--region", "left-upper", "--k", 10000)
        assert "warning" in proc.stdout and "exceeds index size" in proc.stdout
        gallery = json.loads((out / "outputs" / "gallery.json").read_text())
        n_entries = sum(len(json.loads(line)["findings"])
                        for line in chain["test_corpus"].read_text().splitlines()[1:])
        assert len(gallery["results"]) == n_entries

    def test_explain_stub_end_to_end(self, chain, tmp_path):
        out = tmp_path / "explain"
        run_cli("explain", "--out", out, "--corpus", chain["test_corpus"],
                "--checkpoint", chain["ckpt2"], "--mode", "region-query", "--k", 1)
        payload = json.loads((out / "outputs" / "explain.json").read_text())
        assert payload["pseudo_gt_mean"] == 5.0
        assert payload["backend"] == "stub"
        assert 1.0 <= payload["overall_mean"] <= 5.0
        records = (out / "outputs" / "explain_records.jsonl").read_text().splitlines()
        assert len(records) == payload["n_queries"]


class TestExitCodes:
    def test_missing_corpus_is_exit_three(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path / "r"), "--corpus",
                     str(tmp_path / "absent.jsonl"), "--stage", "1"])
        assert code == EXIT_MISSING_FILE
        assert "missing input file" in capsys.readouterr().err

    def test_corrupt_corpus_is_exit_four(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("this is not json\n")
        code = main(["train", "--out", str(tmp_path / "r"), "--corpus", str(bad),
                     "--stage", "1"])
        assert code == EXIT_FORMAT
        assert "error" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_exit_four(self, chain, tmp_path, capsys):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"\x00" * 64)
        code = main(["eval-retrieval", "--out", str(tmp_path / "r"), "--corpus",
                     str(chain["test_corpus"]), "--checkpoint", str(bad)])
        assert code == EXIT_FORMAT

    def test_unreachable_backend_is_exit_five(self, chain, tmp_path, capsys):
        code = main(["explain", "--out", str(tmp_path / "r"), "--corpus",
                     str(chain["test_corpus"]), "--checkpoint", str(chain["ckpt2"]),
                     "--backend", "remote", "--endpoint", "http://127.0.0.1:9/x",
                     "--model-name", "m", "--timeout", "2"])
        assert code == EXIT_BACKEND
        assert "backend error" in capsys.readouterr().err

    def test_remote_without_endpoint_is_exit_one(self, chain, tmp_path, capsys):
        code = main(["explain", "--out", str(tmp_path / "r"), "--corpus",
                     str(chain["test_corpus"]), "--checkpoint", str(chain["ckpt2"]),
                     "--backend", "remote"])
        assert code == EXIT_ERROR
        assert "--endpoint" in capsys.readouterr().err

    def test_unknown_region_is_exit_one(self, chain, tmp_path, capsys):
        sample_id = json.loads(
            chain["test_corpus"].read_text().splitlines()[1])["id"]
        code = main(["query", "--out", str(tmp_path / "r"), "--corpus",
                     str(chain["test_corpus"]), "--checkpoint", str(chain["ckpt2"]),
                     "--image", sample_id, "--region", "nowhere"])
        assert code == EXIT_ERROR
        assert "unknown region" in capsys.readouterr().err

    def test_boxless_corpus_grounding_is_exit_one(self, tmp_path, capsys):
        gen = tmp_path / "normals"
        assert main(["gen", "--out", str(gen), "--n-train", "6", "--n-test", "4",
                     "--normal-fraction", "1.0", "--seed", "0"]) == EXIT_OK
        capsys.readouterr()
        train = gen / "outputs" / "train.jsonl"
        r = tmp_path / "s1"
        assert main(["train", "--out", str(r), "--corpus", str(train),
                     "--stage", "1", "--epochs", "1", "--batch-size", "4"]) == EXIT_OK
        capsys.readouterr()
        code = main(["eval-grounding", "--out", str(tmp_path / "g"), "--corpus",
                     str(gen / "outputs" / "test.jsonl"),
                     "--checkpoint", str(r / "outputs" / "checkpoint.pt")])
        assert code == EXIT_ERROR
        assert "boxes" in capsys.readouterr().err

    def test_unknown_flag_is_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--out", "x", "--frobnicate"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_subcommand_is_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == EXIT_USAGE
