"""End-to-end smoke run of every command at toy scale."""
import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from slot_tok.cli import main
from slot_tok.quantizer import read_tokens

TOKENIZER = {
    "patch_size": 4, "d_input": 16, "encoder_layers": 1, "encoder_heads": 2, "ref_dim": 64,
    "slots": {"num_slots": 3, "dim": 16, "gru_iters": 2, "num_layers": 1, "heads": 2},
    "quantizer": {"codebook_size": 16, "code_dim": 4, "depth": 2},
    "decoder": {"channels": [8, 16], "blocks_per_res": 1, "heads": 2,
                "diffusion": {"timesteps": 20, "beta_start": 0.001, "beta_end": 0.2}},
}


def _ok(result):
    assert result.exit_code == 0, result.output + repr(result.exception)
    return result.output


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run = CliRunner().invoke
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "tokenizer": TOKENIZER,
        "train": {"batch_size": 4, "warmup_steps": 1, "max_lr": 1e-3, "log_every": 1},
        "lm": {"total_steps": 3, "warmup_steps": 1, "batch_size": 4, "direction": "t2i",
               "lm": {"width": 32, "layers": 1, "heads": 2, "context": 32}},
    }))
    data = root / "data"
    _ok(run(main, ["gen-data", "--out", str(data), "--n-train", "6", "--n-val", "2", "--seed", "1",
                   "--canvas", "16", "--max-objects", "2"]))
    _ok(run(main, ["pretrain-ref", "--data", str(data), "--out", str(root / "ref.pt"), "--steps", "3"]))
    _ok(run(main, ["train-stage1", "--data", str(data), "--ref", str(root / "ref.pt"), "--out", str(root / "s1.pt"),
                   "--config", str(cfg), "--steps", "3", "--log", str(root / "s1.jsonl")]))
    _ok(run(main, ["train-stage2", "--data", str(data), "--ckpt", str(root / "s1.pt"), "--out", str(root / "s2.pt"),
                   "--config", str(cfg), "--steps", "3"]))
    return root, data, cfg


def test_training_commands_write_checkpoints_and_traces(workspace):
    root, _, _ = workspace
    assert (root / "s2.pt").exists()
    lines = [json.loads(x) for x in (root / "s1.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3]


def test_tokenize_and_reconstruct_dataset(workspace):
    root, data, _ = workspace
    run = CliRunner().invoke
    _ok(run(main, ["tokenize", "--ckpt", str(root / "s2.pt"), "--data", str(data), "--out", str(root / "t.bin")]))
    codes, header = read_tokens(root / "t.bin")
    assert codes.shape == (2, 3, 2) and header["V"] == 16
    _ok(run(main, ["reconstruct", "--ckpt", str(root / "s2.pt"), "--tokens", str(root / "t.bin"),
                   "--out", str(root / "rec"), "--steps", "2"]))
    assert len(list((root / "rec").glob("recon_*.png"))) == 2


def test_single_image_round_trip(workspace):
    root, data, _ = workspace
    run = CliRunner().invoke
    png = next((data / "samples").glob("*.png"))
    _ok(run(main, ["tokenize", "--ckpt", str(root / "s2.pt"), "--image", str(png), "--out", str(root / "one.bin")]))
    _ok(run(main, ["reconstruct", "--ckpt", str(root / "s2.pt"), "--tokens", str(root / "one.bin"),
                   "--out", str(root / "img.png"), "--steps", "2", "--seed", "3"]))
    assert np.asarray(Image.open(root / "img.png")).shape == (16, 16, 3)
    _ok(run(main, ["attn-maps", "--ckpt", str(root / "s2.pt"), "--image", str(png), "--out", str(root / "maps")]))
    index = json.loads((root / "maps" / "index.json").read_text())
    assert len(index["images"]) == 1 and len(index["images"][0]["slots"]) == 3
    bad = run(main, ["tokenize", "--ckpt", str(root / "s2.pt"), "--out", str(root / "x.bin")])
    assert bad.exit_code != 0 and "exactly one" in bad.output


def test_mismatched_token_file_is_rejected(workspace, tmp_path):
    from slot_tok.quantizer import write_tokens

    root, _, _ = workspace
    write_tokens(tmp_path / "t.bin", np.zeros((1, 3, 2), dtype=np.int64), 16, "deadbeef")
    res = CliRunner().invoke(main, ["reconstruct", "--ckpt", str(root / "s2.pt"), "--tokens", str(tmp_path / "t.bin"),
                                    "--out", str(tmp_path / "o.png")])
    assert res.exit_code != 0 and "deadbeef" in res.output


def test_eval_and_token_drop_reports(workspace):
    root, data, _ = workspace
    run = CliRunner().invoke
    _ok(run(main, ["eval", "--ckpt", str(root / "s2.pt"), "--data", str(data), "--report", str(root / "r.json"),
                   "--steps", "2"]))
    report = json.loads((root / "r.json").read_text())
    assert {"psnr", "ssim", "foreground_ari"} <= set(report)
    out = _ok(run(main, ["token-drop", "--ckpt", str(root / "s2.pt"), "--data", str(data), "--fraction", "0.5",
                         "--seed", "1", "--steps", "2"]))
    assert "relative deltas" in out


def test_mllm_train_and_chat(workspace):
    root, data, cfg = workspace
    run = CliRunner().invoke
    out = _ok(run(main, ["train-mllm", "--tokenizer-ckpt", str(root / "s2.pt"), "--data", str(data),
                         "--out", str(root / "lm.pt"), "--config", str(cfg)]))
    assert "accuracy" in out
    png = next((data / "samples").glob("*.png"))
    _ok(run(main, ["chat", "--ckpt", str(root / "s2.pt"), "--lm", str(root / "lm.pt"), "--prompt", "a red circle",
                   "--image", str(png), "--max-new-tokens", "8", "--image-out", str(root / "chat.png")]))
    res = run(main, ["chat", "--ckpt", str(root / "s2.pt"), "--lm", str(root / "lm.pt"), "--prompt", "a zebra"])
    assert res.exit_code != 0 and "zebra" in res.output
