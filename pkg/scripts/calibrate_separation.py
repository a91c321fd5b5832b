"""Frame-wise Bayes-classifier AUC of the synthetic corpus as a function of
``GenConfig.separation``.

The Bayes classifier uses the true mixture parameters and the marginal
per-frame noise (drift + white), so it is the best any frame-independent
classifier can do. Used to pick the default separation (AUC near 0.9).

    python scripts/calibrate_separation.py --videos 60
"""

import argparse
import dataclasses

import numpy as np
from scipy.special import logsumexp
from sklearn.metrics import roc_auc_score

from pipeloc.synthgen import GenConfig, _components, frame_labels, generate_video


def _mixture_loglik(x, means, var):
    d2 = ((x[:, None, :] - means[None]) ** 2).sum(-1)
    return logsumexp(-0.5 * d2 / var, axis=1) - np.log(len(means))


def bayes_auc(cfg: GenConfig, n_videos: int) -> float:
    comps = _components(cfg)
    var = cfg.drift_sigma**2 + cfg.noise_sigma**2
    bkg = np.concatenate([comps.bkg_static, comps.bkg_dynamic], 1)
    off = np.concatenate([comps.def_static, comps.def_dynamic], 1)
    dfc = (bkg[:, None, :] + off[None]).reshape(-1, bkg.shape[1])
    scores, labels = [], []
    for i in range(n_videos):
        s = generate_video(cfg, i)
        x = s.features.concat().astype(np.float64)
        scores.append(_mixture_loglik(x, dfc, var) - _mixture_loglik(x, bkg, var))
        labels.append(frame_labels(s))
    return roc_auc_score(np.concatenate(labels), np.concatenate(scores))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--videos", type=int, default=60)
    ap.add_argument("--grid", type=float, nargs="*", default=[0.2, 0.3, 0.4, 0.5, 0.6, 0.8])
    args = ap.parse_args()
    base = GenConfig()
    for sep in args.grid:
        cfg = dataclasses.replace(base, separation=sep)
        print(f"separation={sep:.2f}  frame-wise Bayes AUC={bayes_auc(cfg, args.videos):.4f}")


if __name__ == "__main__":
    main()
