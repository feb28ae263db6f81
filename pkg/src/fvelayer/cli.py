"""Command-line surface. Every subcommand is deterministic given its
flags and seeds; the delimited outputs come with rendered figures."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .config import set_deterministic_reductions
from .data import FeatureBatch
from .encoding import encode, encode_groups, fv_column_names, jacobian_analytic, jacobian_fd, normalize_fv
from .fileio import read_feature_file, read_gmm_file, write_feature_file, write_gmm_file, write_labels_csv
from .gmm import DiagGmm, InitSpec, em_full, mean_log_likelihood
from .parts import filter_by_norm
from .streaming import bias_corrected, init_streaming, streaming_step
from .synth import parts_to_feature_batch, synth_circle, synth_parts
from .training import (
    TrainConfig,
    evaluate,
    fill_missing_parts,
    gap_concat_baseline,
    init_toy_model,
    model_logits,
    train,
)


class CliError(Exception):
    pass


def _read_config_file(path: str) -> dict[str, str]:
    """Flat key-value file mirroring long flags: `key = value` or
    `key value` per line, '#' comments."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = line.split("=", 1)
        else:
            key, _, val = line.partition(" ")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _batches(batch: FeatureBatch, batch_size: int, steps: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(batch.n, size=min(batch_size, batch.n), replace=False)
        yield batch.data[idx]


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "circle":
        batch, labels = synth_circle(args.components, args.samples, args.sigma,
                                     args.difficulty, args.seed)
        write_feature_file(out, batch)
        gids = batch.group_ids()
        group_labels = np.asarray([labels[batch.groups == g][0] for g in gids])
        write_labels_csv(out.with_suffix(".labels.csv"), gids, group_labels)
        print(f"wrote {batch.n} rows of dim {batch.dim} to {out}")
    else:
        dataset = synth_parts(args.classes, args.parts, args.d_in,
                              args.visibility, args.noise, args.images_per_class, args.seed)
        batch, labels = parts_to_feature_batch(dataset.train + dataset.test)
        write_feature_file(out, batch)
        write_labels_csv(out.with_suffix(".labels.csv"), batch.group_ids(), labels)
        print(f"wrote {batch.n} part vectors over {len(labels)} images to {out}")
    return 0


def _write_trace_outputs(out_gmm: Path, trace: np.ndarray, gmm: DiagGmm,
                         data: np.ndarray, state=None) -> None:
    write_gmm_file(out_gmm, gmm, state=state)
    csv_path = out_gmm.with_suffix(".loglik.csv")
    with open(csv_path, "w") as f:
        f.write("step,mean_loglik\n")
        for i, ll in enumerate(trace):
            f.write(f"{i + 1},{ll!r}\n")
    report.save_loglik_curve(out_gmm.with_suffix(".loglik.png"), trace)
    if data.shape[1] == 2:
        report.save_gmm_scatter(out_gmm.with_suffix(".fit.png"), data, gmm)


def cmd_train_gmm(args) -> int:
    batch = read_feature_file(args.input)
    state = init_streaming(batch, args.k, getattr(args, "lambda"),
                           InitSpec(strategy=args.init, seed=args.seed))
    trace = []
    for sub in _batches(batch, args.batch_size, args.steps, args.seed):
        state = streaming_step(state, sub)
        trace.append(mean_log_likelihood(bias_corrected(state), batch))
    gmm = bias_corrected(state)
    _write_trace_outputs(Path(args.out), np.asarray(trace), gmm, batch.data, state=state)
    print(f"streaming EM: {args.steps} steps, final mean log-likelihood {trace[-1]:.6f}")
    return 0


def cmd_em_full(args) -> int:
    batch = read_feature_file(args.input)
    result = em_full(batch, args.k, InitSpec(strategy=args.init, seed=args.seed),
                     max_iters=args.max_iters, tol=args.tol)
    _write_trace_outputs(Path(args.out), result.loglik_trace, result.gmm, batch.data)
    print(f"full EM: {len(result.loglik_trace)} iterations, "
          f"final mean log-likelihood {result.loglik_trace[-1]:.6f}")
    return 0


def cmd_encode(args) -> int:
    gmm, _ = read_gmm_file(args.gmm)
    batch = read_feature_file(args.input)
    if args.filter_norm:
        batch, _ = filter_by_norm(batch)
    flags = [] if not args.normalize else args.normalize.split(",")
    unknown = set(flags) - {"power", "l2"}
    if unknown:
        raise CliError(f"unknown normalization flags: {sorted(unknown)}")
    gids, fvs = encode_groups(gmm, batch)
    with open(args.out, "w") as f:
        f.write("group," + ",".join(fv_column_names(gmm)) + "\n")
        for gid, fv in zip(gids, fvs):
            fv = normalize_fv(fv, "power" in flags, "l2" in flags)
            f.write(str(int(gid)) + "," + ",".join(repr(v) for v in fv) + "\n")
    print(f"encoded {len(gids)} groups into {2 * gmm.k * gmm.dim} columns -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        var = np.maximum(rng.uniform(0.2, 2.0, (args.k, args.d)), 1e-3)
        w = rng.dirichlet(np.full(args.k, 5.0))
        gmm = DiagGmm(w, rng.standard_normal((args.k, args.d)), var)
        x = rng.standard_normal((args.n, args.d))
        jd = jacobian_fd(gmm, x, args.eps)
        ja = jacobian_analytic(gmm, x)
        err = np.max(np.abs(ja - jd) / np.maximum(1.0, np.abs(jd)))
        worst = max(worst, float(err))
    print(f"max relative error over {args.trials} trials: {worst:.3e}")
    return 0 if worst <= args.tol else 1


def cmd_demo_joint(args) -> int:
    cfg_file = _read_config_file(args.config) if args.config else {}

    def get(key, cast, default):
        return cast(cfg_file.get(key, default))

    seed = get("seed", int, 0)
    dataset = synth_parts(
        num_classes=get("classes", int, 8),
        parts_per_image_max=get("parts", int, 4),
        d_in=get("d_in", int, 6),
        visibility_rate=get("visibility", float, 0.7),
        noise=get("noise", float, 0.25),
        images_per_class=get("images_per_class", int, 40),
        seed=seed,
    )
    cfg = TrainConfig(
        epochs=get("epochs", int, 30),
        batch_size=get("batch_size", int, 16),
        lr=get("lr", float, 0.5),
        lam=get("lambda", float, 0.9),
        k=get("k", int, 3),
        feature_dim=get("feature_dim", int, 3),
        seed=seed,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    model = init_toy_model(dataset, cfg)
    frozen_w, frozen_b = model.extractor_w.copy(), model.extractor_b.copy()
    metrics = train(model, dataset, cfg)
    with open(outdir / "metrics.jsonl", "w") as f:
        for m in metrics:
            f.write(json.dumps({k: m[k] for k in ("step", "loss", "accuracy", "gmm_loglik")}) + "\n")
    report.save_training_curves(outdir / "training.png", metrics)

    p_max = dataset.parts_per_image_max
    yte = np.asarray([img.label for img in dataset.test])
    logits = model_logits(model)
    results = {
        "fve_visible": evaluate(logits, dataset.test, yte)[0],
        "fve_ordered": evaluate(logits, fill_missing_parts(dataset.test, p_max), yte)[0],
        "fve_shuffled": evaluate(
            logits, fill_missing_parts(dataset.test, p_max, shuffle_seed=seed), yte)[0],
        "gap_ordered": gap_concat_baseline(dataset, cfg, frozen_w, frozen_b, "ordered"),
        "gap_shuffled": gap_concat_baseline(dataset, cfg, frozen_w, frozen_b, "shuffled"),
    }
    with open(outdir / "accuracies.csv", "w") as f:
        f.write("arm,accuracy\n")
        for name, acc in results.items():
            f.write(f"{name},{acc!r}\n")
    report.save_accuracy_bars(outdir / "accuracies.png", results)
    for name, acc in results.items():
        print(f"{name}: {acc:.4f}")
    return 0


def cmd_bench(args) -> int:
    gmm, meta = read_gmm_file(args.gmm)
    batch = read_feature_file(args.input)
    state = init_streaming(batch, gmm.k, meta.get("lambda") or 0.9,
                           InitSpec(strategy="provided", provided=gmm))

    t0 = time.perf_counter()
    state = streaming_step(state, batch)
    t_em = time.perf_counter() - t0

    current = bias_corrected(state)
    t0 = time.perf_counter()
    encode_groups(current, batch)
    t_enc = time.perf_counter() - t0

    total = t_em + t_enc
    print(f"total forward: {total * 1e3:.3f} ms")
    print(f"em update:     {t_em * 1e3:.3f} ms ({100 * t_em / total:.2f}%)")
    print(f"encode:        {t_enc * 1e3:.3f} ms ({100 * t_enc / total:.2f}%)")
    print(f"encode/total ratio: {t_enc / total:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fve", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sy = sub.add_parser("synth", help="generate synthetic datasets")
    sysub = sy.add_subparsers(dest="kind", required=True)
    circ = sysub.add_parser("circle")
    circ.add_argument("--components", type=int, default=10)
    circ.add_argument("--samples", type=int, default=400)
    circ.add_argument("--sigma", type=float, default=0.1)
    circ.add_argument("--difficulty", choices=["simple", "hard"], default="simple")
    circ.add_argument("--seed", type=int, default=0)
    circ.add_argument("--out", required=True)
    circ.set_defaults(func=cmd_synth)
    par = sysub.add_parser("parts")
    par.add_argument("--classes", type=int, default=8)
    par.add_argument("--parts", type=int, default=4)
    par.add_argument("--d-in", type=int, default=6)
    par.add_argument("--visibility", type=float, default=0.7)
    par.add_argument("--noise", type=float, default=0.25)
    par.add_argument("--images-per-class", type=int, default=40)
    par.add_argument("--seed", type=int, default=0)
    par.add_argument("--out", required=True)
    par.set_defaults(func=cmd_synth)

    tg = sub.add_parser("train-gmm", help="streaming EM on a feature file")
    tg.add_argument("--input", required=True)
    tg.add_argument("--k", type=int, required=True)
    tg.add_argument("--lambda", type=float, default=0.9)
    tg.add_argument("--batch-size", type=int, default=128)
    tg.add_argument("--steps", type=int, default=50)
    tg.add_argument("--seed", type=int, default=0)
    tg.add_argument("--init", choices=["random-subset", "kmeans-plus-plus"],
                    default="kmeans-plus-plus")
    tg.add_argument("--out", required=True)
    tg.set_defaults(func=cmd_train_gmm)

    ef = sub.add_parser("em-full", help="reference full-batch EM")
    ef.add_argument("--input", required=True)
    ef.add_argument("--k", type=int, required=True)
    ef.add_argument("--max-iters", type=int, default=100)
    ef.add_argument("--tol", type=float, default=1e-8)
    ef.add_argument("--seed", type=int, default=0)
    ef.add_argument("--init", choices=["random-subset", "kmeans-plus-plus"],
                    default="kmeans-plus-plus")
    ef.add_argument("--out", required=True)
    ef.set_defaults(func=cmd_em_full)

    en = sub.add_parser("encode", help="per-group Fisher vectors to CSV")
    en.add_argument("--gmm", required=True)
    en.add_argument("--input", required=True)
    en.add_argument("--filter-norm", action="store_true")
    en.add_argument("--normalize", default="", help="comma list of power,l2")
    en.add_argument("--out", required=True)
    en.set_defaults(func=cmd_encode)

    gc = sub.add_parser("gradcheck", help="analytic vs finite-difference Jacobian")
    gc.add_argument("--k", type=int, default=2)
    gc.add_argument("--d", type=int, default=3)
    gc.add_argument("--n", type=int, default=4)
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    dj = sub.add_parser("demo-joint", help="joint training demo on synthetic parts")
    dj.add_argument("--config", default=None)
    dj.add_argument("--out", default="demo-joint-out")
    dj.set_defaults(func=cmd_demo_joint)

    be = sub.add_parser("bench", help="relative overhead of EM update and encoding")
    be.add_argument("--gmm", required=True)
    be.add_argument("--input", required=True)
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    set_deterministic_reductions(True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
