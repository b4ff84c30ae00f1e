"""Detection, open-set attribution and clustering on the planted-kernel corpus.

    python3 scripts/synthetic_end_to_end.py --noise 0.04 --out results/e2e.json
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from fsd import metrics, synth
from fsd.filterbank import TrainConfig, train_filter_bank
from fsd.mixture import fit_gmm
from fsd.selfdesc import describe_image
from fsd.tasks import attribute_batch, fit_attributor, kmeans


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=60)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.04)
    p.add_argument("--kernels", default="gauss3,hblur,vblur,diag")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--b", type=int, default=7)
    p.add_argument("--scales", type=int, default=2)
    p.add_argument("--exact", action="store_true", help="closed-form description fit")
    p.add_argument("--n-known", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()

    t0 = time.perf_counter()
    spec = synth.default_corpus(args.count, args.size, args.noise, args.kernels.split(","), args.seed)
    data = synth.generate(spec)
    half = args.count // 2
    bank = train_filter_bank(data["real"][:half], TrainConfig(k=args.k, m=args.m, crop=args.size, seed=args.seed)).bank
    feats = {
        s: np.array([describe_image(im, bank, args.b, args.scales, exact=args.exact).vector() for im in imgs])
        for s, imgs in data.items()
    }
    t_feat = time.perf_counter() - t0

    gmm = fit_gmm(feats["real"][:half], 1).model
    real = gmm.score_samples(feats["real"][half:])
    det = {s: metrics.auc(real, gmm.score_samples(f)) for s, f in feats.items() if s != "real"}

    names = list(feats)
    known, unknown = names[:args.n_known], names[args.n_known:]
    n_tr, n_val = int(0.66 * args.count), int(0.83 * args.count)
    att = fit_attributor({s: feats[s][:n_tr] for s in known}, 1,
                         validation={s: feats[s][n_tr:n_val] for s in known})
    kres = attribute_batch(att, np.vstack([feats[s][n_val:] for s in known]))
    truth = np.repeat(known, args.count - n_val)
    cand = np.array([r.candidate for r in kres])
    open_set = {"known_accuracy": float(np.mean(cand == truth))}
    if unknown:
        ures = attribute_batch(att, np.vstack([feats[s] for s in unknown]))
        k_ll, u_ll = [r.max_ll for r in kres], [r.max_ll for r in ures]
        open_set["au_crr"] = metrics.au_crr(k_ll, u_ll)
        open_set["au_oscr"] = metrics.au_oscr(k_ll, cand, truth, u_ll)

    x, y = np.vstack(list(feats.values())), np.repeat(names, args.count)
    clustering = {}
    for mult in (1, 2, 4):
        res = kmeans(x, mult * len(names), seed=args.seed)
        clustering[f"{mult}N"] = metrics.clustering_scores(res.labels, y)

    out = {
        "config": vars(args), "detection_auc": det, "open_set": open_set, "clustering": clustering,
        "seconds": {"features": t_feat, "total": time.perf_counter() - t0},
    }
    print(json.dumps(out, indent=1))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
