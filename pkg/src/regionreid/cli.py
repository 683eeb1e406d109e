"""Command-line harness: train-prompt, train, eval, retrieve, sweep.

Every command takes ``--config <file> --data <dir> --out <dir>``; the data
directory is ignored for the synthetic data source.  Model-loading
commands (``eval``, ``retrieve``) rebuild the model from the checkpoint's
embedded config snapshot; the ``--config`` file governs which data is
loaded.  Reports are JSON; training logs are JSON lines.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import Config, load_config
from .data import Sample, load_directory_dataset, resize_image
from .model import ReidModel
from .regions import compute_masks
from .retrieval import RetrievalIndex, build_index, distance_matrix
from .training import (
    JsonlWriter,
    evaluate_model,
    load_model,
    load_splits,
    run_sweep,
    save_model,
    train,
    train_prompt,
)


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="flat key-value config file")
    parser.add_argument("--data", default=None, help="dataset root (directory source only)")
    parser.add_argument("--out", required=True, help="output directory")


def _load_config(args) -> Config:
    if args.config is None:
        return Config()
    return load_config(args.config)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train_prompt(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train_split, _, _ = load_splits(cfg, args.data)
    log = JsonlWriter(out / "prompt_log.jsonl")
    try:
        model, history = train_prompt(cfg, train_split, log=log)
    finally:
        log.close()
    save_model(out / "prompt.ckpt", model, epoch=len(history))
    print(f"prompt stage done: {len(history)} epochs, checkpoint {out / 'prompt.ckpt'}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    train_split, _, _ = load_splits(cfg, args.data)
    model = None
    if args.init:
        model, _ = load_model(args.init)
    log = JsonlWriter(out / "train_log.jsonl")
    try:
        model, history = train(cfg, train_split, model=model, log=log)
    finally:
        log.close()
    save_model(out / "model.ckpt", model, epoch=len(history))
    print(f"joint stage done: {len(history)} epochs, checkpoint {out / 'model.ckpt'}")
    return 0


def _write_ranked(path: Path, ranked: list[dict]) -> None:
    lines = []
    for entry in ranked:
        lines.append(f"query {entry['query']} (person {entry['person_id']})")
        for m in entry["matches"]:
            lines.append(
                f"    {m['distance']:.6f}  person {m['person_id']}  {m['path']}"
            )
    path.write_text("\n".join(lines) + "\n")


def _dump_masks(model: ReidModel, samples, mask_dir: Path) -> None:
    mask_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        protos = model.prototype_set()
        for i, s in enumerate(samples):
            image = resize_image(s.image, model.backbone.image_size)
            seg = compute_masks(model.feature_map(image), protos, model.config.gamma)
            pred = seg.masks.argmax(dim=0).to(torch.uint8).numpy()
            stem = Path(s.path).stem if s.path else f"{i:06d}"
            Image.fromarray(pred, mode="L").save(mask_dir / f"{stem}.png")


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, _ = load_model(args.checkpoint)
    _, query_split, gallery_split = load_splits(cfg, args.data)
    report = evaluate_model(model, query_split, gallery_split, dump_top_k=args.dump_top_k)
    ranked = report.pop("ranked", None)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    if ranked is not None:
        _write_ranked(out / "ranked.txt", ranked)
    if args.dump_masks and model.config.region_mode == "masks":
        _dump_masks(model, query_split.samples, out / "masks")
    print(json.dumps(report))
    return 0


def _cmd_retrieve(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    model, _ = load_model(args.checkpoint)
    if cfg.data_source == "synthetic":
        _, _, gallery_split = load_splits(cfg, args.data)
    else:
        gallery_split = load_directory_dataset(Path(args.data) / "gallery", "gallery")
    with Image.open(args.query) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    query_sample = Sample(
        torch.from_numpy(arr).permute(2, 0, 1).contiguous(),
        person_id=0,
        camera_id=-1,
        path=str(args.query),
    )
    query_index = RetrievalIndex(tuple(model.inference_entries([query_sample])))
    gallery_index = build_index(gallery_split, model)
    dists = distance_matrix(query_index, gallery_index)[0]
    order = torch.argsort(dists, stable=True)[: args.top_k]
    lines = [f"query {args.query}"]
    for gi in order:
        e = gallery_index.entries[int(gi)]
        lines.append(f"    {float(dists[gi]):.6f}  person {e.person_id}  {e.path}")
    text = "\n".join(lines) + "\n"
    (out / "retrieval.txt").write_text(text)
    print(text, end="")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    log = JsonlWriter(out / "sweep_log.jsonl")
    try:
        rows = run_sweep(cfg, args.param, values, args.data, log=log)
    finally:
        log.close()
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    header = f"{args.param:>14} | rank1   rank5   mAP"
    print(header)
    print("-" * len(header))
    for row in rows:
        if "error" in row:
            print(f"{row['value']:>14} | FAILED: {row['error']}")
        else:
            r = row["report"]
            print(f"{row['value']:>14} | {r['rank1']:.4f}  {r['rank5']:.4f}  {r['mAP']:.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="regionreid",
        description="Region-confidence occluded person re-identification harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-prompt", help="stage one: train prompt context under the seg loss")
    _add_common(p)
    p.set_defaults(func=_cmd_train_prompt)

    p = sub.add_parser("train", help="stage two: joint training")
    _add_common(p)
    p.add_argument("--init", default=None, help="prompt-stage checkpoint to start from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="index query/gallery and report CMC/mAP")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dump-top-k", type=int, default=None, help="write per-query ranked lists")
    p.add_argument("--dump-masks", action="store_true", help="write argmax masks for query images")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("retrieve", help="rank the gallery against one query image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True, help="query image file")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("sweep", help="train+eval once per hyperparameter value")
    _add_common(p)
    p.add_argument("--param", required=True, choices=("n_regions", "gamma", "context_length", "momentum"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
