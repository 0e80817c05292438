"""Command-line entry points: synth-data, train, eval, verify, report.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 runtime abort. Every command is deterministic for a fixed config,
so reruns produce byte-identical artifacts (the run summary's wall_time field
is the one diagnostic exception).
"""

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import degrade as dg
from . import model, optim, verify
from .config import ConfigError, config_to_dict, load_config
from .degrade import ConfounderSet, mix
from .metrics import evaluate, write_eval_csv, write_gap_csv

__all__ = ["main", "cmd_synth_data", "cmd_train", "cmd_eval", "cmd_verify", "cmd_report"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_ABORT = 3

STATE_SEGMENTS = ("adam.m", "adam.v", "adam.t", "next_iteration")


def _tune_allocator():
    # keep large numpy temporaries on the heap; cuts page-fault churn in the
    # training loop (M_MMAP_THRESHOLD)
    try:
        import ctypes
        ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 30)
    except OSError:
        pass


def _train_images(cfg):
    ds = cfg.dataset
    if ds.type == "procedural":
        return [dg.synth_clean_image(mix(ds.seed, 0, i), ds.h, ds.w)
                for i in range(ds.count)]
    files = sorted(f for f in os.listdir(ds.path) if f.endswith(".ppm"))
    if not files:
        raise ConfigError(f"no .ppm files under {ds.path}")
    return [dg.CleanImage(dg.read_ppm(os.path.join(ds.path, f)), f) for f in files]


def _eval_datasets(cfg):
    ds = cfg.dataset
    if ds.type == "procedural":
        images = [dg.synth_clean_image(mix(ds.seed, 1, i), ds.h, ds.w)
                  for i in range(ds.eval_count)]
        return {"procedural": images}
    return {os.path.basename(os.path.normpath(ds.path)) or "directory":
            _train_images(cfg)}


def cmd_synth_data(cfg):
    """Write the clean corpus plus every counterfactual rendition, with a manifest."""
    out = cfg.output_dir
    os.makedirs(os.path.join(out, "clean"), exist_ok=True)
    specs = list(cfg.train_specs) + list(cfg.test_specs)
    cset = ConfounderSet(tuple(specs))
    images = _train_images(cfg)
    entries = []
    for idx, img in enumerate(images):
        clean_path = os.path.join("clean", f"{idx:04d}.ppm")
        dg.write_ppm(os.path.join(out, clean_path), img.pixels)
        entries.append({"source_id": img.source_id, "spec": None,
                        "seed": mix(cfg.dataset.seed, 0, idx), "path": clean_path})
        renditions = dg.counterfactual_augment(img, cset, mix(cfg.dataset.seed, 2, idx))
        for s_idx, (spec, rendition) in enumerate(zip(specs, renditions)):
            sub = os.path.join("distorted", spec.label())
            os.makedirs(os.path.join(out, sub), exist_ok=True)
            path = os.path.join(sub, f"{idx:04d}.ppm")
            dg.write_ppm(os.path.join(out, path), rendition)
            entries.append({"source_id": img.source_id, "spec": spec.to_json(),
                            "seed": mix(mix(cfg.dataset.seed, 2, idx), s_idx),
                            "path": path})
    dg.write_manifest(os.path.join(out, "manifest.json"), entries)
    print(f"wrote {len(images)} clean + {len(entries) - len(images)} distorted images "
          f"under {out}")
    return EXIT_OK


def _save_state(path, adam, next_iteration):
    from .autodiff import ParamVector
    arrays = [("next_iteration", np.array([float(next_iteration)]))]
    if adam is not None:
        arrays += [("adam.m", adam.m), ("adam.v", adam.v),
                   ("adam.t", np.array([float(adam.t)]))]
    model.save_checkpoint(path, ParamVector.from_arrays(arrays))


def _load_state(path, beta):
    pv = model.load_checkpoint(path)
    start = int(pv.array("next_iteration")[0])
    if "adam.m" not in pv.names():
        return None, start
    st = optim.AdamState(pv.array("adam.m"), pv.array("adam.v"),
                         int(pv.array("adam.t")[0]), 0.9, 0.999, 1e-8, beta)
    return st, start


def cmd_train(cfg):
    """Train the configured variant; write checkpoint, per-step CSV, summary."""
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    images = _train_images(cfg)
    cset = ConfounderSet(tuple(cfg.train_specs))
    tc = cfg.train
    tc.validate(cset)

    start_iter, adam = 0, None
    if cfg.resume_from:
        net = model.RestorationNet(
            cfg.net, model.load_checkpoint(os.path.join(cfg.resume_from, "checkpoint.dilnet")))
        state_path = os.path.join(cfg.resume_from, "state.dilnet")
        if os.path.exists(state_path):
            adam, start_iter = _load_state(state_path, tc.beta)
    else:
        net = model.init(cfg.net, mix(tc.seed, 0xD11))
    if adam is None and tc.variant in ("erm", "dil_ss", "dil_ps"):
        adam = optim.AdamState.zeros(len(net.params), beta1=0.9, beta2=0.999, lr=tc.beta)

    def save_all(tag_net, iteration_done):
        model.save_checkpoint(os.path.join(out, "checkpoint.dilnet"), tag_net.params)
        _save_state(os.path.join(out, "state.dilnet"), adam, iteration_done + 1)

    def on_step(n, rep, opt):
        if cfg.checkpoint_every and (rep.iteration + 1) % cfg.checkpoint_every == 0:
            save_all(n, rep.iteration)

    stop = cfg.stop_after or None
    t0 = time.time()
    net, reports = optim.train(net, images, cset, tc, on_step=on_step,
                               start_iteration=start_iter, adam=adam,
                               stop_iteration=stop)
    wall = time.time() - t0

    optim.write_train_csv(os.path.join(out, "train_log.csv"), reports,
                          tc.variant, cset.n)
    done = len(reports) + start_iter
    save_all(net, done - 1)
    summary = {
        "variant": tc.variant,
        "iterations_run": done,
        "final_loss": reports[-1].outer_loss if reports else None,
        "wall_time": wall,
        "config": config_to_dict(cfg),
    }
    with open(os.path.join(out, "run_summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    target = min(tc.iters, stop) if stop else tc.iters
    if done < target:
        print(f"training aborted after {done} of {target} iterations; partial log kept")
        return EXIT_ABORT
    final = "n/a" if summary["final_loss"] is None else f"{summary['final_loss']:.6g}"
    print(f"trained {tc.variant} for {done} iterations; final loss {final} ({wall:.1f}s)")
    return EXIT_OK


def cmd_eval(cfg, checkpoint_path):
    """Score a checkpoint over seen and unseen specs; write row/gap/plot CSVs."""
    if not os.path.exists(checkpoint_path):
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    net = model.RestorationNet(cfg.net, model.load_checkpoint(checkpoint_path))
    datasets = _eval_datasets(cfg)
    seen = ConfounderSet(tuple(cfg.train_specs))
    report = evaluate(net, datasets, seen, list(cfg.test_specs),
                      seed=mix(cfg.train.seed, 0xE7A1), channel=cfg.eval_channel)
    write_eval_csv(report, os.path.join(out, "eval_rows.csv"))
    write_gap_csv(report, os.path.join(out, "eval_gaps.csv"))
    label = os.path.basename(os.path.dirname(os.path.abspath(checkpoint_path)))
    with open(os.path.join(out, "plot_data.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["checkpoint", "spec", "level", "seen", "psnr_db"])
        for r in report.rows:
            w.writerow([label, r.spec.label(), repr(r.spec.level()), int(r.seen),
                        repr(r.psnr_db)])
    for r in report.rows:
        print(f"{r.dataset_id:>12}  {r.spec.label():>10}  "
              f"{'seen' if r.seen else 'unseen':>6}  psnr {r.psnr_db:6.2f}  "
              f"ssim {r.ssim:.4f}")
    return EXIT_OK


def cmd_verify():
    results = verify.run_all()
    print(verify.format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_report(row_csvs, out_path):
    """Merge eval row CSVs from several checkpoints into one comparison table."""
    tables = []
    for path in row_csvs:
        label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        tables.append((label, {(r["dataset_id"], r["spec_params"], r["channel"]):
                               r for r in rows}))
    keys = []
    for _, t in tables:
        for k in t:
            if k not in keys:
                keys.append(k)
    header = ["dataset_id", "spec", "channel", "seen"]
    for label, _ in tables:
        header += [f"psnr_db[{label}]", f"ssim[{label}]"]
    lines = [header]
    for k in keys:
        seen = next((t[k]["seen"] for _, t in tables if k in t), "")
        row = [k[0], k[1], k[2], seen]
        for _, t in tables:
            r = t.get(k)
            row += [r["psnr_db"] if r else "", r["ssim"] if r else ""]
        lines.append(row)
    with open(out_path, "w", newline="") as f:
        csv.writer(f).writerows(lines)
    widths = [max(len(str(row[i])) for row in lines) for i in range(len(header))]
    for row in lines:
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return EXIT_OK


def _build_parser():
    class Parser(argparse.ArgumentParser):
        def error(self, message):
            raise ConfigError(message)

    p = Parser(prog="dilkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON experiment config")
        sp.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, default=None, help="training seed override")
        sp.add_argument("--out", default=None, help="output directory override")

    common(sub.add_parser("synth-data", help="materialize the distorted corpus"))
    common(sub.add_parser("train", help="train the configured variant"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint over seen/unseen specs")
    common(ev)
    ev.add_argument("--checkpoint", default=None,
                    help="checkpoint path (default: <out>/checkpoint.dilnet)")
    sub.add_parser("verify", help="run the invariant suite")
    rp = sub.add_parser("report", help="merge eval CSVs into one table")
    rp.add_argument("rows", nargs="+", help="eval_rows.csv files")
    rp.add_argument("--out", default="report.csv")
    return p


def main(argv=None):
    _tune_allocator()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "verify":
            return cmd_verify()
        if args.command == "report":
            return cmd_report(args.rows, args.out)
        cfg = load_config(args.config, args.sets, args.seed, args.out)
        if args.command == "synth-data":
            return cmd_synth_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            ckpt = args.checkpoint or os.path.join(cfg.output_dir, "checkpoint.dilnet")
            return cmd_eval(cfg, ckpt)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (optim.StepAbort, FloatingPointError, OSError) as e:
        print(f"abort: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
