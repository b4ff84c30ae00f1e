"""Command-line front end.

Exit codes: 0 success, 1 domain error, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import imaging, metrics, store, synth
from .errors import FSDError, UnreadableFile
from .filterbank import FilterBank, TrainConfig, diversity_loss, energy_loss, train_filter_bank
from .mixture import EMConfig, fit_gmm
from .selfdesc import FitConfig, describe_image
from .tasks import UNKNOWN, attribute_batch, calibrate_detector, fit_attributor, kmeans, silhouette

log = logging.getLogger("fsd")


# ---------------------------------------------------------------- manifests

def read_manifest(path):
    """Return ``[(absolute_path, label_or_None), ...]`` from a ``path,label`` CSV."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UnreadableFile(f"cannot read manifest {path}: {exc}") from exc
    if rows and "path" not in rows[0]:
        raise UnreadableFile(f"manifest {path} needs a 'path' column")
    seen = set()
    out = []
    for row in rows:
        p = row["path"].strip()
        if p in seen:
            raise FSDError(f"duplicate path in manifest: {p}")
        seen.add(p)
        label = row.get("label")
        if label is not None:
            label = label.strip()
            if not label:
                raise FSDError(f"empty label for {p}")
        out.append((str((path.parent / p).resolve()) if not Path(p).is_absolute() else p, label))
    return out


def _meta_path(features_path) -> Path:
    return Path(str(features_path) + ".meta.json")


def read_features(path):
    x, labels = store.load_features(path)
    meta = {}
    mp = _meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
    paths = meta.get("paths") or [f"row{i}" for i in range(x.shape[0])]
    return x.astype(np.float64), labels, paths, meta


def write_json(path, doc) -> None:
    store.atomic_write(path, (json.dumps(store._enc(doc), indent=1, sort_keys=True) + "\n").encode())


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _echo(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------- commands

def cmd_train_filters(args):
    entries = read_manifest(args.manifest)
    opts = imaging.PreprocessOptions(args.max_side, args.m)
    images = [imaging.load_grayscale(p, opts) for p, _ in entries]
    cfg = TrainConfig(
        k=args.k, m=args.m, lam=args.lam, alpha=args.alpha, lr=args.lr, epochs=args.epochs,
        crop=args.crop, batch_size=args.batch_size, seed=args.seed, max_steps=args.max_steps,
    )
    t0 = time.perf_counter()
    res = train_filter_bank(images, cfg)
    le, _ = energy_loss(res.bank.weights, [imaging.center_crop(im, args.crop) for im in images])
    ld, _ = diversity_loss(res.bank.weights, cfg.alpha)
    sigma_min = float(res.bank.singular_values()[-1])
    store.save_model(res.bank, args.out, {"config": cfg.to_dict(), "seed": args.seed, "n_images": len(images)})
    print(f"L_E={le:.6g}")
    print(f"L_diversity={ld:.6g}")
    print(f"sigma_min={sigma_min:.6g}")
    print(f"steps={res.steps}")
    if args.timing:
        print(f"seconds={time.perf_counter() - t0:.3f}")
    return 0


def _describe_one(job):
    path, weights, opts, b, scales, fit = job
    try:
        img = imaging.load_grayscale(path, opts)
        return describe_image(img, FilterBank(weights), b, scales, fit).vector(), None
    except FSDError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def describe_paths(paths, bank, b, scales, fit, max_side=512, workers=1):
    """Describe every image file; returns ``[(vector or None, error or None), ...]`` in input order."""
    opts = imaging.PreprocessOptions(max_side, bank.m)
    jobs = [(p, bank.weights, opts, b, scales, fit) for p in paths]
    if workers <= 1:
        return [_describe_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_describe_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def describe_arrays(images, bank, b, scales, fit):
    return np.array([describe_image(img, bank, b, scales, fit).vector() for img in images])


def cmd_describe(args):
    entries = read_manifest(args.manifest)
    bank = store.load_model(args.bank, expect="filter_bank").model
    fit = FitConfig(lr=args.lr, max_iters=args.max_iters)
    t0 = time.perf_counter()
    results = describe_paths([p for p, _ in entries], bank, args.b, args.scales, fit, args.max_side, args.workers)
    rows, labels, paths, failures = [], [], [], []
    for (p, label), (vec, err) in zip(entries, results):
        if err is not None:
            failures.append({"path": p, "error": err})
            continue
        rows.append(vec)
        labels.append(label)
        paths.append(p)
    d = bank.k * (args.b * args.b - 1)
    x = np.array(rows).reshape(len(rows), d)
    has_labels = all(lab is not None for lab in labels) and len(labels) > 0
    if failures and not args.skip_errors:
        for f in failures:
            print(f"error: {f['path']}: {f['error']}", file=sys.stderr)
        print(f"{len(failures)} of {len(entries)} images failed; nothing written (use --skip-errors)", file=sys.stderr)
        return 1
    store.save_features(args.out, x, labels if has_labels else None)
    write_json(_meta_path(args.out), {
        "config": _echo(args), "bank_id": bank.identity(), "k": bank.k, "m": bank.m,
        "b": args.b, "scales": args.scales, "paths": paths, "failures": failures,
    })
    for f in failures:
        print(f"warning: skipped {f['path']}: {f['error']}", file=sys.stderr)
    print(f"rows={x.shape[0]} dim={x.shape[1]} failures={len(failures)}")
    if args.timing:
        print(f"seconds={time.perf_counter() - t0:.3f}")
    return 0


def _provenance(args, meta):
    keep = {k: meta[k] for k in ("bank_id", "k", "m", "b", "scales") if k in meta}
    return {"config": _echo(args), "seed": args.seed, "features": keep, "created": store.timestamp()}


def cmd_fit_detector(args):
    x, _, _, meta = read_features(args.features)
    val = x
    if args.val_features:
        val = read_features(args.val_features)[0]
    else:
        log.warning("no --val-features: calibrating the threshold on the training features")
    gmm = fit_gmm(x, args.components, EMConfig(seed=args.seed)).model
    det = calibrate_detector(gmm, val, args.quantile)
    store.save_model(det, args.out, _provenance(args, meta))
    print(f"threshold={det.threshold!r}")
    return 0


def cmd_detect(args):
    x, _, paths, _ = read_features(args.features)
    det = store.load_model(args.model, expect="detector").model
    scores = det.gmm.score_samples(x) if x.shape[0] else np.zeros(0)
    rows = [(p, repr(float(s)), "real" if s >= det.threshold else "synthetic") for p, s in zip(paths, scores)]
    write_csv(args.out_scores, ["path", "score", "label"], rows)
    print(f"scored={len(rows)} real={sum(r[2] == 'real' for r in rows)}")
    return 0


def cmd_fit_attributor(args):
    per_source, val, meta = {}, {}, {}
    rng = np.random.default_rng(args.seed)
    for f in args.features_per_source:
        x, labels, _, meta = read_features(f)
        groups = {}
        if labels is None:
            groups[Path(f).name.split(".")[0]] = x
        else:
            for lab in sorted(set(labels)):
                groups[lab] = x[[i for i, l in enumerate(labels) if l == lab]]
        for lab, g in groups.items():
            n_val = int(round(args.val_fraction * g.shape[0]))
            idx = rng.permutation(g.shape[0])
            per_source[lab] = g[idx[n_val:]]
            val[lab] = g[idx[:n_val]] if n_val else g
    model = fit_attributor(per_source, args.components, args.quantile, val, EMConfig(seed=args.seed))
    store.save_model(model, args.out, _provenance(args, meta))
    print(f"sources={','.join(model.labels)} threshold={model.threshold!r}")
    return 0


def cmd_attribute(args):
    x, _, paths, _ = read_features(args.features)
    model = store.load_model(args.model, expect="attributor").model
    res = attribute_batch(model, x) if x.shape[0] else []
    write_csv(args.out, ["path", "source", "max_ll", "candidate"],
              [(p, a.source, repr(a.max_ll), a.candidate) for p, a in zip(paths, res)])
    print(f"attributed={len(res)} unknown={sum(a.source == UNKNOWN for a in res)}")
    return 0


def _standardize(x):
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def cmd_cluster(args):
    x, _, paths, _ = read_features(args.features)
    z = _standardize(x) if args.standardize else x
    res = kmeans(z, args.k, restarts=args.restarts, seed=args.seed)
    write_csv(args.out, ["path", "cluster"], [(p, int(c)) for p, c in zip(paths, res.labels)])
    if args.model_out:
        store.save_model(res, args.model_out, {"config": _echo(args), "seed": args.seed})
    print(f"k={res.k} inertia={res.inertia!r}")
    if args.elbow:
        rows = []
        for k in range(1, args.elbow + 1):
            r = kmeans(z, k, restarts=args.restarts, seed=args.seed)
            sil = silhouette(z, r.labels) if 1 < k < z.shape[0] and len(set(r.labels)) > 1 else float("nan")
            rows.append((k, repr(r.inertia), repr(sil)))
        write_csv(args.elbow_out or Path(args.out).with_suffix(".elbow.csv"), ["k", "inertia", "silhouette"], rows)
    return 0


def _read_table(path, key_col, value_cols):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    return {r[key_col]: tuple(r[c] for c in value_cols) for r in rows}


def _truth(args):
    return {p: lab for p, lab in read_manifest(args.truth)}


def cmd_eval(args):
    truth = _truth(args) if args.truth else {}
    result = {}
    if args.metric in ("auc", "threshold-sweep"):
        scores = _read_table(args.scores, "path", ["score"])
        pos = [float(s[0]) for p, s in scores.items() if truth[p] == args.positive]
        neg = [float(s[0]) for p, s in scores.items() if truth[p] != args.positive]
        if args.metric == "auc":
            result["auc"] = metrics.auc(pos, neg)
            negs = sorted({truth[p] for p in scores if truth[p] != args.positive})
            for lab in negs:
                result[f"auc[{lab}]"] = metrics.auc(pos, [float(s[0]) for p, s in scores.items() if truth[p] == lab])
        else:
            allv = np.array(pos + neg)
            grid = np.quantile(allv, np.linspace(0, 1, args.grid_size))
            curve = metrics.accuracy_vs_threshold(pos, neg, grid)
            out = args.out_curve or "threshold_sweep.csv"
            write_csv(out, ["threshold", "balanced_accuracy"], [(repr(t), repr(a)) for t, a in curve])
            best = int(np.argmax(curve[:, 1]))
            result["best_threshold"] = float(curve[best, 0])
            result["best_balanced_accuracy"] = float(curve[best, 1])
    elif args.metric in ("au-crr", "au-oscr"):
        att = _read_table(args.scores, "path", ["max_ll", "candidate"])
        known = set(args.known.split(",")) if args.known else None
        if known is None:
            raise FSDError("--known is required for open-set metrics")
        k_ll, k_pred, k_truth, u_ll = [], [], [], []
        for p, (ll, cand) in att.items():
            if truth[p] in known:
                k_ll.append(float(ll))
                k_pred.append(cand)
                k_truth.append(truth[p])
            else:
                u_ll.append(float(ll))
        result["au_crr"] = metrics.au_crr(k_ll, u_ll)
        result["au_oscr"] = metrics.au_oscr(k_ll, k_pred, k_truth, u_ll)
        result["known_accuracy"] = float(np.mean(np.array(k_pred) == np.array(k_truth)))
        result["note"] = "au_crr is computed as the known-vs-unknown AUC of max log-likelihoods"
    elif args.metric == "clustering":
        if args.assignments:
            assign = _read_table(args.assignments, "path", ["cluster"])
            paths = list(assign)
            labels = [assign[p][0] for p in paths]
            result.update(metrics.clustering_scores(labels, [truth[p] for p in paths]))
        else:
            x, flabels, paths, _ = read_features(args.features)
            y = [truth[p] for p in paths] if truth else flabels
            if y is None:
                raise FSDError("clustering eval needs --truth or labeled features")
            k = args.k_multiple * len(set(y))
            z = _standardize(x) if args.standardize else x
            res = kmeans(z, k, restarts=args.restarts, seed=args.seed)
            result["k"] = k
            result.update(metrics.clustering_scores(res.labels, y))
    for key, val in result.items():
        print(f"{key}={val}")
    if args.out_json:
        write_json(args.out_json, {"metric": args.metric, "result": result, "config": _echo(args)})
    return 0


def cmd_synth_sources(args):
    if args.spec:
        spec = synth.CorpusSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = synth.default_corpus(count=args.count, size=args.size, noise=args.noise, seed=args.seed)
    manifest = synth.write_corpus(spec, args.out_dir)
    print(f"manifest={manifest}")
    return 0


def robustness_table(entries, bank, detector, qualities, b, scales, fit, max_side=512, positive="real"):
    """AUC per JPEG quality (``None`` = uncompressed) of the detector's scores."""
    opts = imaging.PreprocessOptions(max_side, bank.m)
    originals = [imaging.load_grayscale(p, opts) for p, _ in entries]
    labels = [lab for _, lab in entries]
    rows = []
    for q in [None] + [int(v) for v in qualities]:
        imgs = originals if q is None else [imaging.jpeg_recompress(im, q) for im in originals]
        x = describe_arrays(imgs, bank, b, scales, fit)
        scores = detector.gmm.score_samples(x)
        pos = scores[[i for i, lab in enumerate(labels) if lab == positive]]
        negs = sorted({lab for lab in labels if lab != positive})
        per = [metrics.auc(pos, scores[[i for i, lab in enumerate(labels) if lab == n]]) for n in negs]
        rows.append(("None" if q is None else q, metrics.auc(pos, scores[[i for i, lab in enumerate(labels) if lab != positive]]), float(np.mean(per))))
    return rows


def cmd_eval_robustness(args):
    entries = read_manifest(args.manifest)
    bank = store.load_model(args.bank, expect="filter_bank").model
    mf = store.load_model(args.detector, expect="detector")
    feat = mf.provenance.get("features", {})
    b = args.b or feat.get("b", 11)
    scales = args.scales or feat.get("scales", 3)
    fit = FitConfig(lr=args.lr, max_iters=args.max_iters)
    qualities = [q for q in args.qualities.split(",") if q and q.lower() != "none"]
    rows = robustness_table(entries, bank, mf.model, qualities, b, scales, fit, args.max_side, args.positive)
    for q, a, m in rows:
        print(f"quality={q} auc={a:.4f} mean_pair_auc={m:.4f}")
    if args.out:
        write_csv(args.out, ["quality", "auc", "mean_pair_auc"], [(q, repr(a), repr(m)) for q, a, m in rows])
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-filters", help="learn a predictive filter bank from real images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--m", type=int, default=11)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--alpha", type=float, default=1e-6)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--crop", type=int, default=128)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--max-side", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timing", action="store_true")
    s.set_defaults(func=cmd_train_filters)

    s = sub.add_parser("describe", help="extract self-descriptions into a feature file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--b", type=int, default=11)
    s.add_argument("--scales", type=int, default=3)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--max-iters", type=int, default=10000)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--max-side", type=int, default=512)
    s.add_argument("--skip-errors", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timing", action="store_true")
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("fit-detector", help="fit the real-image GMM and calibrate its threshold")
    s.add_argument("--features", required=True)
    s.add_argument("--val-features")
    s.add_argument("--components", type=int, default=8)
    s.add_argument("--quantile", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_detector)

    s = sub.add_parser("detect", help="score features with a detector")
    s.add_argument("--features", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out-scores", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("fit-attributor", help="fit one GMM per known source")
    s.add_argument("--features-per-source", nargs="+", required=True)
    s.add_argument("--components", type=int, default=1)
    s.add_argument("--quantile", type=float, default=0.05)
    s.add_argument("--val-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_attributor)

    s = sub.add_parser("attribute", help="open-set source attribution")
    s.add_argument("--features", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attribute)

    s = sub.add_parser("cluster", help="k-means over self-descriptions")
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--restarts", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--standardize", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--model-out")
    s.add_argument("--elbow", type=int, default=0, help="also write inertia/silhouette for k=1..N")
    s.add_argument("--elbow-out")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("eval", help="compute evaluation metrics")
    s.add_argument("--metric", required=True, choices=["auc", "au-crr", "au-oscr", "clustering", "threshold-sweep"])
    s.add_argument("--scores")
    s.add_argument("--assignments")
    s.add_argument("--features")
    s.add_argument("--truth")
    s.add_argument("--positive", default="real")
    s.add_argument("--known")
    s.add_argument("--k-multiple", type=int, default=1, choices=[1, 2, 4])
    s.add_argument("--restarts", type=int, default=10)
    s.add_argument("--standardize", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid-size", type=int, default=101)
    s.add_argument("--out-curve")
    s.add_argument("--out-json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth-sources", help="write a planted-kernel synthetic corpus")
    s.add_argument("--spec")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=int, default=60)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--noise", type=float, default=0.04)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_sources)

    s = sub.add_parser("eval-robustness", help="detector AUC under JPEG recompression")
    s.add_argument("--manifest", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--qualities", default="100,90,80,70,60,50")
    s.add_argument("--b", type=int, default=None)
    s.add_argument("--scales", type=int, default=None)
    s.add_argument("--max-iters", type=int, default=10000)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--max-side", type=int, default=512)
    s.add_argument("--positive", default="real")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_robustness)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UnreadableFile, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FSDError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: path missing from truth/manifest: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
