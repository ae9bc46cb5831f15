"""Shot-level alarms and the ROC curve they trace out."""

import numpy as np

from halfsync.data import Shot
from halfsync.evaluation import roc_auc, score_shots

if __name__ == "__main__":
    rng = np.random.default_rng(0)
    shots, traces = [], []
    for i in range(60):
        disruptive = i % 4 == 0
        n = 300
        tr = rng.normal(0, 0.3, n)
        if disruptive:
            tr[200:] += np.linspace(0, 1.5, 100)  # the warning builds before the end
        shots.append(Shot(i, np.zeros((n, 1), np.float32), disruptive, n - 1 if disruptive else None))
        traces.append(tr)
    scores, labels = score_shots(traces, shots)
    curve, auc = roc_auc(scores, labels)
    print(f"{labels.sum()} disruptive / {labels.size} shots, AUC {auc:.3f}")
    for f, t in list(zip(curve.fpr, curve.tpr))[::max(1, len(curve.fpr) // 8)]:
        print(f"  fpr {f:.2f}  tpr {t:.2f}")
