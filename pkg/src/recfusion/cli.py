"""Command-line entry points: train, fuse, evaluate, gradcheck, synth.

Every knob lives in the YAML run config; command-line arguments only pick the
command, the config and (for fuse/evaluate) the files to work on.

Exit status: 0 on success, 1 when a check or tolerance fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from recfusion import checkpoint as ckpt
from recfusion import gradcheck
from recfusion.config import ConfigError, RunConfig, load_config
from recfusion.data import (
    PairDataset,
    full_batch,
    load_pair_dataset,
    load_pair_root,
    make_synthetic_dataset,
    save_pair_root,
    write_image,
    ycbcr_to_rgb,
)
from recfusion.errors import RecFusionError, TrainingError
from recfusion.metrics import METRICS, evaluate
from recfusion.networks import fusion_forward, proposal_forward
from recfusion.trainer import focus_agreement, train

log = logging.getLogger("recfusion")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input: reported on stderr with exit status 2."""


# -- helpers --------------------------------------------------------------------

def _datasets(cfg: RunConfig) -> tuple[PairDataset, PairDataset | None]:
    d = cfg.data
    if d.train_root is None:
        s = d.synth
        train_ds = make_synthetic_dataset(cfg.task, s.n_train, s.size, s.seed, s.blur_sigma)
        hold = make_synthetic_dataset(cfg.task, s.n_holdout, s.size, s.holdout_seed, s.blur_sigma)
        return train_ds, hold
    for root in (d.train_root, d.holdout_root):
        if root is not None and not Path(root).is_dir():
            raise InputError(f"dataset directory not found: {root}")
    train_ds = load_pair_root(d.train_root)
    hold = load_pair_root(d.holdout_root) if d.holdout_root is not None else None
    return train_ds, hold


def plot_history(history, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for stage, key, label in (("fusion", "loss_f", "fusion L_f"), ("fusion", "loss_r", "fusion L_r"),
                              ("outer", "loss_r", "meta-test L_r"), ("holdout", "loss_r", "held-out L_r")):
        pts = [(r["step"], r[key]) for r in history if r["stage"] == stage and np.isfinite(r[key])]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, "o-" if stage == "holdout" else "-", label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def heatmap_rgb(values):
    from matplotlib import colormaps

    return colormaps["viridis"](np.clip(values, 0, 1))[..., :3]


def _load_roles(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        roles = ckpt.load_collections(path)
    except Exception as exc:  # zip/json/shape problems all mean "not a checkpoint"
        raise InputError(f"unreadable checkpoint {path}: {exc}") from exc
    if "F" not in roles:
        raise InputError(f"{path} holds no fusion (role F) parameters; found roles {sorted(roles)}")
    return roles


def _pick_chroma(pair, source):
    first, second = (pair.chroma_a, pair.chroma_b) if source == "a" else (pair.chroma_b, pair.chroma_a)
    return first if first is not None else second


# -- commands -------------------------------------------------------------------

def cmd_train(config_path) -> int:
    cfg = load_config(config_path)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    train_ds, hold = _datasets(cfg)
    state = train(train_ds, cfg.train, cfg.net, cfg.loss, holdout=hold, out_dir=out)
    plot_history(state.history, out / "loss_curve.png")

    summary = {"final_checkpoint": str(out / "final.ckpt"),
               "sha256": ckpt.file_digest(out / "final.ckpt")}
    held = [r["loss_r"] for r in state.history if r["stage"] == "holdout"]
    if held:
        summary.update(holdout_loss_r_initial=held[0], holdout_loss_r_final=held[-1],
                       holdout_loss_r_drop=1 - held[-1] / held[0])
    if hold is not None and all(p.mask is not None for p in hold) and not cfg.train.fixed_weights:
        summary["focus_agreement"] = focus_agreement(state.theta_P, full_batch(hold))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_fuse(checkpoint, dir_a, dir_b, out_dir, config_path=None) -> int:
    cfg = load_config(config_path) if config_path else RunConfig()
    roles = _load_roles(checkpoint)
    for d in (dir_a, dir_b):
        if not Path(d).is_dir():
            raise InputError(f"input directory not found: {d}")
    pairs = load_pair_dataset(dir_a, dir_b)
    theta_F = roles["F"].to(torch.float32)
    theta_P = roles["P"].to(torch.float32) if "P" in roles else None
    out = Path(out_dir)
    for p in pairs:
        a = torch.from_numpy(p.a).float()[None, None]
        b = torch.from_numpy(p.b).float()[None, None]
        with torch.no_grad():
            fused = fusion_forward(theta_F, a, b)[0, 0].double().numpy()
        chroma = _pick_chroma(p, cfg.data.chroma_source)
        img = fused if chroma is None else ycbcr_to_rgb(fused, chroma)
        write_image(out / f"{p.name}.png", img, bits=8)
        if theta_P is not None:
            with torch.no_grad():
                w_a = proposal_forward(theta_P, a, b).w_a[0, 0].double().numpy()
            write_image(out / "w_a" / f"{p.name}.png", heatmap_rgb(w_a), bits=8)
    print(f"fused {len(pairs)} pairs into {out}")
    return EXIT_OK


def cmd_evaluate(dir_a, dir_b, fused_dir, out_path, metrics=METRICS) -> int:
    for d in (dir_a, dir_b, fused_dir):
        if not Path(d).is_dir():
            raise InputError(f"input directory not found: {d}")
    pairs = load_pair_dataset(dir_a, dir_b)
    fused_pairs = load_pair_dataset(fused_dir, fused_dir)
    if len(fused_pairs) != len(pairs) or fused_pairs.names != pairs.names:
        raise InputError(f"{len(pairs)} source pairs but {len(fused_pairs)} fused images "
                         f"(names must match one to one)")
    report = evaluate(pairs, [p.a for p in fused_pairs], metrics)
    out = Path(out_path)
    report.to_csv(out.with_suffix(".csv"))
    report.to_json(out.with_suffix(".json"))
    means = report.means
    print("  ".join(f"{m}={means[m]:.4f}" for m in report.metrics))
    return EXIT_OK


def cmd_gradcheck(config_path, first_order_only=False) -> int:
    cfg = load_config(config_path)
    g = cfg.gradcheck
    f_new, analytic, numeric = gradcheck.toy_meta_gradient()
    print(f"toy scalar case: theta_F' = {f_new:.6f}, analytic meta-gradient = {analytic:.6f}, "
          f"finite difference = {numeric:.6f}")
    results = gradcheck.run_all(g.seed, g.net_config(), cfg.loss, g.first_order_tol, g.second_order_tol,
                                g.inner_step, g.include_recon_path, g.max_meta_entries)
    for r in results:
        print(r.line())
    if first_order_only:
        gap = gradcheck.first_order_gap(g.seed, g.net_config(), cfg.loss, g.inner_step)
        print(f"first-order approximation: relative gap {gap['relative_gap']:.3e}, "
              f"cosine {gap['cosine']:+.4f} (|full| {gap['norm_full']:.3e}, "
              f"|first-order| {gap['norm_first_order']:.3e})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_synth(config_path) -> int:
    cfg = load_config(config_path)
    s = cfg.data.synth
    root = cfg.output_path() / "data"
    train_ds = make_synthetic_dataset(cfg.task, s.n_train, s.size, s.seed, s.blur_sigma)
    hold = make_synthetic_dataset(cfg.task, s.n_holdout, s.size, s.holdout_seed, s.blur_sigma)
    save_pair_root(train_ds, root / "train")
    save_pair_root(hold, root / "holdout")
    print(f"wrote {len(train_ds)} training and {len(hold)} held-out {cfg.task} pairs under {root}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the alternating meta-training schedule")
    p.add_argument("config")

    p = sub.add_parser("fuse", help="fuse directory pairs with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("out_dir")
    p.add_argument("--config", help="run config (only the data.chroma_source setting is used)")

    p = sub.add_parser("evaluate", help="compute EN/SD/SF/AG/SCD/SSIM/VIF for fused images")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("fused_dir")
    p.add_argument("out_path", help="report path; .csv and .json files are written next to each other")

    p = sub.add_parser("gradcheck", help="finite-difference checks of both gradient orders")
    p.add_argument("config")
    p.add_argument("--first-order-only", action="store_true",
                   help="also report the gap between the first-order surrogate and the full meta-gradient")

    p = sub.add_parser("synth", help="write a synthetic dataset as PNG directory pairs")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "fuse":
            return cmd_fuse(args.checkpoint, args.dir_a, args.dir_b, args.out_dir, args.config)
        if args.command == "evaluate":
            return cmd_evaluate(args.dir_a, args.dir_b, args.fused_dir, args.out_path)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.config, args.first_order_only)
        if args.command == "synth":
            return cmd_synth(args.config)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (InputError, ConfigError, RecFusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
