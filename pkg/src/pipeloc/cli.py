"""Command-line entry point: ``pipeloc <subcommand> ...``.

Relative ``--out`` paths resolve under ``$PIPELOC_OUT_ROOT`` (default: the
working directory); relative input paths that do not exist as given are
looked up there too. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from . import config as config_mod
from .config import ABLATION_PRESETS, RunConfig
from .datamodel import SPLITS, Manifest, write_manifest
from .encoders import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, PipelocError
from .evaluation import IOU_THRESHOLDS, EvalReport, ground_truth, write_predictions
from .pipeline import (
    build_localization_model,
    evaluate_model,
    open_manifest,
    run_full,
    run_pointsup,
    run_pretext,
    seq_state_of,
)
from .prototypes import PrototypeMemory
from .synthgen import corpus_stats, generate_dataset

log = logging.getLogger("pipeloc")

OUT_ROOT_ENV = "PIPELOC_OUT_ROOT"


def resolve_out(path) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = Path(os.environ.get(OUT_ROOT_ENV, ".")) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def resolve_in(path) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    return Path(os.environ.get(OUT_ROOT_ENV, ".")) / p


class JsonlLog:
    """Line-delimited metrics log; every record carries the config hash."""

    def __init__(self, path: Path, config_hash: str):
        self.fh = open(path, "w", encoding="utf-8")
        self.config_hash = config_hash

    def __call__(self, rec: dict) -> None:
        self.fh.write(json.dumps({**rec, "config_hash": self.config_hash}) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.yaml").write_text(f"# config_hash: {cfg.hash()}\n" + cfg.dumps(), encoding="utf-8")


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir, force: bool = False) -> Manifest:
    out = resolve_out(out_dir)
    manifest = generate_dataset(cfg.gen, out, force=force)
    manifest.meta["config_hash"] = cfg.hash()
    write_manifest(manifest, out / "manifest.json")
    print(stats_table(manifest, cfg))
    return manifest


def stats_table(manifest: Manifest, cfg: RunConfig) -> str:
    stats = manifest.meta.get("stats") or corpus_stats(manifest.load_split(*SPLITS))
    counts = {}
    for e in manifest.entries:
        counts[e.split] = counts.get(e.split, 0) + 1
    g = cfg.gen
    rows = [
        ("videos", f"{len(manifest.entries)}", f"{g.n_videos}"),
        ("defect frame fraction", f"{stats['defect_fraction']:.3f}", f"{g.defect_fraction:.3f}"),
        ("defects per defect video", f"{stats['defects_per_defect_video']:.2f}", f"{g.mean_defects_per_video:.2f}"),
        ("single-defect share", f"{stats['single_defect_share']:.2f}", f"{g.p_single_defect:.2f}"),
    ]
    rows += [(f"split {name}", str(counts.get(name, 0)), "") for name in
             ("train_labeled", "train_unlabeled", "val", "test")]
    lines = [f"{'statistic':<28}{'measured':>10}{'target':>10}"]
    lines += [f"{a:<28}{b:>10}{c:>10}" for a, b, c in rows]
    return "\n".join(lines)


def cmd_pretrain(cfg: RunConfig, data, out_dir) -> Path:
    out = resolve_out(out_dir)
    manifest = open_manifest(resolve_in(data))
    _write_config(cfg, out)
    logger = JsonlLog(out / "pretext_log.jsonl", cfg.hash())
    try:
        model, records = run_pretext(cfg, manifest, on_step=logger)
    finally:
        logger.close()
    path = out / "pretext.pt"
    save_checkpoint(
        path,
        "pretext",
        model,
        cfg.encoder,
        run_config=cfg.to_dict(),
        config_hash=cfg.hash(),
        in_dim=2 * manifest.dim,
        trained=not cfg.ablation.disable_pretext,
    )
    log.info("pretext checkpoint written to %s (%d steps)", path, len(records))
    return path


def _pretext_seq_state(ckpt: dict, cfg: RunConfig, in_dim: int) -> dict:
    problems = []
    enc = asdict(ckpt["encoder"])
    for k, v in asdict(cfg.encoder).items():
        if enc.get(k) != v:
            problems.append(f"encoder.{k}: checkpoint {enc.get(k)} vs config {v}")
    if ckpt.get("in_dim") != in_dim:
        problems.append(f"input dim: checkpoint {ckpt.get('in_dim')} vs data {in_dim}")
    if problems:
        raise ConfigError("pretext checkpoint incompatible with config/data: " + "; ".join(problems))
    prefix = "q.seq."
    return {k[len(prefix):]: v for k, v in ckpt["state_dict"].items() if k.startswith(prefix)}


def cmd_train(cfg: RunConfig, data, pretext_ckpt, out_dir) -> Path:
    out = resolve_out(out_dir)
    manifest = open_manifest(resolve_in(data))
    seq_state = _pretext_seq_state(load_checkpoint(resolve_in(pretext_ckpt), "pretext"), cfg, 2 * manifest.dim)
    _write_config(cfg, out)
    logger = JsonlLog(out / "train_log.jsonl", cfg.hash())
    try:
        two = run_pointsup(cfg, manifest, seq_state, on_step=logger)
    finally:
        logger.close()
    path = out / "model.pt"
    save_checkpoint(
        path,
        "pointsup",
        two.model,
        cfg.encoder,
        run_config=cfg.to_dict(),
        config_hash=cfg.hash(),
        in_dim=2 * manifest.dim,
        vo_dim=manifest.vo_dim,
        memory=two.memory.to_dict() if two.memory is not None else None,
        best_epoch=two.best_epoch,
    )
    log.info("model checkpoint written to %s (best epoch %d)", path, two.best_epoch)
    return path


def load_trained(path, manifest: Manifest):
    ckpt = load_checkpoint(resolve_in(path), "pointsup")
    cfg = config_mod.from_dict(ckpt["run_config"])
    problems = []
    if ckpt["in_dim"] != 2 * manifest.dim:
        problems.append(f"input dim: checkpoint {ckpt['in_dim']} vs data {2 * manifest.dim}")
    if ckpt["vo_dim"] != manifest.vo_dim:
        problems.append(f"VO dim: checkpoint {ckpt['vo_dim']} vs data {manifest.vo_dim}")
    if problems:
        raise ConfigError("checkpoint incompatible with data: " + "; ".join(problems))
    model = build_localization_model(cfg, ckpt["in_dim"], ckpt["vo_dim"])
    model.load_state_dict(ckpt["state_dict"])
    memory = PrototypeMemory.from_dict(ckpt["memory"]) if ckpt.get("memory") else None
    return cfg, model, memory


def cmd_eval(checkpoint, data, out_dir, per_video: Optional[bool] = None) -> EvalReport:
    out = resolve_out(out_dir)
    manifest = open_manifest(resolve_in(data))
    cfg, model, memory = load_trained(checkpoint, manifest)
    test = manifest.load_split("test")
    if not test:
        raise DataError("no test videos in manifest")
    report, preds, traces = evaluate_model(cfg, model, memory, test, keep_traces=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True), encoding="utf-8")
    (out / "report.txt").write_text(
        f"config_hash: {cfg.hash()}\n" + report.table("model") + "\n", encoding="utf-8"
    )
    write_predictions(preds, out / "predictions.json")

    from .plots import plot_pr_curves, plot_timeline

    gts = ground_truth(test)
    plot_pr_curves(preds, gts, out / "pr_curves.png")
    if per_video if per_video is not None else cfg.eval.per_video_plots:
        tl = out / "timelines"
        tl.mkdir(exist_ok=True)
        for s in test:
            tr = traces[s.id]
            plot_timeline(s.id, s.fps, tr["score"], tr["gate"], gts[s.id], preds[s.id], tl / f"{s.id}.png")
    print(report.table("model"))
    return report


def ablation_rows(full: EvalReport, reports: dict) -> list[dict]:
    rows = [{"name": "full", "delta_avg_01_07": 0.0, **full.to_json()}]
    for name, rep in reports.items():
        rows.append({"name": name, "delta_avg_01_07": rep.avg_01_07 - full.avg_01_07, **rep.to_json()})
    for r in rows:
        r.pop("per_video", None)
    return rows


def ablation_table(rows: list[dict]) -> str:
    head = f"{'variant':<18}" + "".join(f"{t:>7.1f}" for t in IOU_THRESHOLDS)
    head += f"{'(0.1:0.5)':>11}{'(0.3:0.7)':>11}{'(0.1:0.7)':>11}{'delta':>9}"
    lines = [head]
    for r in rows:
        ap = r["ap_at_iou"]
        line = f"{r['name']:<18}" + "".join(f"{100 * ap[f'{t:.1f}']:>7.2f}" for t in IOU_THRESHOLDS)
        line += "".join(f"{100 * r[k]:>11.2f}" for k in ("avg_01_05", "avg_03_07", "avg_01_07"))
        line += f"{100 * r['delta_avg_01_07']:>+9.2f}"
        lines.append(line)
    return "\n".join(lines)


# presets whose first stage is identical to the full model's
_SHARES_PRETEXT = {"no_vo_gate", "no_proto_modules", "single_prototype"}


def cmd_ablate(cfg: RunConfig, data, out_dir, presets: Optional[Sequence[str]] = None) -> dict:
    out = resolve_out(out_dir)
    manifest = open_manifest(resolve_in(data))
    presets = list(presets or ABLATION_PRESETS)
    unknown = [p for p in presets if p not in ABLATION_PRESETS]
    if unknown:
        raise ConfigError(f"unknown ablation presets {unknown}; choose from {sorted(ABLATION_PRESETS)}")
    shared = seq_state_of(run_pretext(cfg, manifest)[0])
    log.info("ablation: full model")
    full = run_full(cfg, manifest, shared)
    reports, hashes, timings = {}, {"full": cfg.hash()}, {"full": full.timings}
    for name in presets:
        pcfg = cfg.replace(**ABLATION_PRESETS[name])
        log.info("ablation: %s", name)
        res = run_full(pcfg, manifest, shared if name in _SHARES_PRETEXT else None)
        reports[name], hashes[name], timings[name] = res.report, pcfg.hash(), res.timings
    rows = ablation_rows(full.report, reports)
    doc = {
        "config_hash": cfg.hash(),
        "variant_config_hashes": hashes,
        "random_baseline": full.baseline.to_json(),
        "rows": rows,
        "timings": timings,
    }
    (out / "ablation.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
    text = ablation_table(rows)
    (out / "ablation.txt").write_text(f"config_hash: {cfg.hash()}\n{text}\n", encoding="utf-8")
    print(text)
    return doc


def cmd_report(path) -> str:
    p = resolve_in(path)
    if not p.exists():
        raise DataError(f"report not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: not JSON ({exc})") from exc
    if "rows" in doc:
        text = ablation_table(doc["rows"])
    elif "ap_at_iou" in doc:
        text = EvalReport.from_json(doc).table("model")
    else:
        raise DataError(f"{p}: neither an evaluation report nor an ablation table")
    print(text)
    return text


# -- argument parsing ---------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pipeloc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("pretrain", help="stage 1: contrastive pretraining")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="manifest file or corpus directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="stage 2: point-supervised training")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pretext", required=True, help="checkpoint written by 'pretrain'")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a trained model on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-video", action="store_true", help="write a score timeline per test video")

    p = sub.add_parser("ablate", help="full model plus one-component-off variants")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--presets", nargs="*", choices=sorted(ABLATION_PRESETS))

    p = sub.add_parser("report", help="print the table of a report.json or ablation.json")
    p.add_argument("path")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "report":
            cmd_report(args.path)
            return 0
        if args.command == "eval":
            cmd_eval(args.checkpoint, args.data, args.out, args.per_video or None)
            return 0
        cfg = config_mod.load(args.config, args.overrides)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out, args.force)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.data, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.pretext, args.out)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.data, args.out, args.presets)
    except PipelocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
