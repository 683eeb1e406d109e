import json

import numpy as np
import torch
from PIL import Image

from regionreid.cli import main
from regionreid.config import Config, format_config


def _write_config(path, **overrides):
    values = dict(
        synthetic_id_count=5,
        synthetic_images_per_id=4,
        synthetic_query_per_id=1,
        synthetic_gallery_per_id=2,
        batch_p=3,
        batch_k=2,
        epochs=2,
        lr_milestones=(1,),
        prompt_epochs=1,
        learning_rate=1e-3,
        prompt_learning_rate=5e-3,
        seed=4,
    )
    values.update(overrides)
    cfg = Config(**values)
    path.write_text(format_config(cfg))
    return cfg


class TestCliPipeline:
    def test_full_two_stage_flow(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        _write_config(cfg_path)
        out = tmp_path / "out"

        rc = main(["train-prompt", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0
        assert (out / "prompt.ckpt").is_file()
        assert (out / "prompt_log.jsonl").is_file()
        records = [
            json.loads(line) for line in (out / "prompt_log.jsonl").read_text().splitlines()
        ]
        assert all(r["stage"] == "prompt" for r in records)

        rc = main(
            ["train", "--config", str(cfg_path), "--out", str(out),
             "--init", str(out / "prompt.ckpt")]
        )
        assert rc == 0
        assert (out / "model.ckpt").is_file()

        rc = main(
            ["eval", "--config", str(cfg_path), "--out", str(out),
             "--checkpoint", str(out / "model.ckpt"), "--dump-top-k", "3"]
        )
        assert rc == 0
        report = json.loads((out / "metrics.json").read_text())
        assert {"rank1", "rank3", "rank5", "rank10", "mAP", "excluded_queries"} <= set(report)
        assert (out / "ranked.txt").is_file()

    def test_eval_runs_twice_identically(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        _write_config(cfg_path, prompt_mode="handcrafted", epochs=1, prompt_epochs=0)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for dst in (out_a, out_b):
            rc = main(
                ["eval", "--config", str(cfg_path), "--out", str(dst),
                 "--checkpoint", str(out / "model.ckpt")]
            )
            assert rc == 0
        assert (out_a / "metrics.json").read_bytes() == (out_b / "metrics.json").read_bytes()

    def test_retrieve(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        _write_config(cfg_path, prompt_mode="handcrafted", epochs=1, prompt_epochs=0)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        rng = np.random.default_rng(0)
        img = (rng.uniform(0, 1, size=(64, 32, 3)) * 255).astype(np.uint8)
        query_path = tmp_path / "probe.png"
        Image.fromarray(img).save(query_path)
        rc = main(
            ["retrieve", "--config", str(cfg_path), "--out", str(out),
             "--checkpoint", str(out / "model.ckpt"), "--query", str(query_path),
             "--top-k", "5"]
        )
        assert rc == 0
        text = (out / "retrieval.txt").read_text()
        assert "probe.png" in text
        assert len(text.splitlines()) == 6  # header + five matches

    def test_sweep_command(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        _write_config(cfg_path, prompt_mode="handcrafted", epochs=1, prompt_epochs=0)
        out = tmp_path / "out"
        rc = main(
            ["sweep", "--config", str(cfg_path), "--out", str(out),
             "--param", "momentum", "--values", "0.1,0.9"]
        )
        assert rc == 0
        rows = json.loads((out / "sweep.json").read_text())
        assert len(rows) == 2
        assert all("report" in row for row in rows)

    def test_unknown_config_key_fails(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("not_a_real_key = 5\n")
        rc = main(["train-prompt", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert rc == 1

    def test_mask_dump(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        _write_config(cfg_path, prompt_mode="handcrafted", epochs=1, prompt_epochs=0)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        rc = main(
            ["eval", "--config", str(cfg_path), "--out", str(out),
             "--checkpoint", str(out / "model.ckpt"), "--dump-masks"]
        )
        assert rc == 0
        masks = list((out / "masks").glob("*.png"))
        assert len(masks) == 5  # one per query image
        with Image.open(masks[0]) as m:
            arr = np.asarray(m)
        assert arr.max() <= 4
