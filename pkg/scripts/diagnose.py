"""Diagnostics: overfit a small set, inspect loss components and RPN recall."""

import sys
import time

import numpy as np

from msfacedet.boxes import iou_matrix
from msfacedet.rpn import propose
from msfacedet.toydata import generate_toy_dataset
from msfacedet.training import TrainConfig, pipeline_forward, train


def rpn_recall(model, scenes, topk=50):
    hits = total = 0
    for s in scenes:
        st = pipeline_forward(model, s.image)
        anchors = model.anchors_for(st.fused_shape[2], st.fused_shape[3])
        props = propose(st.rpn_logits, st.rpn_deltas, anchors, s.image.shape[3], s.image.shape[2])
        boxes = np.array([p.box for p in props[:topk]]).reshape(-1, 4)
        for g in s.gt_boxes:
            total += 1
            if boxes.size and iou_matrix(g, boxes).max() > 0.5:
                hits += 1
    return hits / max(total, 1)


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 50
    iters = int(sys.argv[2]) if len(sys.argv) > 2 else 1500
    lr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
    scenes = generate_toy_dataset(n, 128, (16, 64), seed=7)
    cfg = TrainConfig(iterations=iters, seed=7, learning_rate=lr)
    t0 = time.time()

    def prog(it, c):
        if it % 100 == 0:
            print(
                f"it {it}: tot {c['total']:.3f} rpn_cls {c['rpn_cls']:.3f} "
                f"rpn_reg {c['rpn_reg']:.3f} det_cls {c['det_cls']:.3f} det_reg {c['det_reg']:.3f}",
                flush=True,
            )

    res = train(scenes, cfg, progress=prog)
    print(f"time {(time.time()-t0)/60:.1f} min")
    print(f"rpn recall@50 on train: {rpn_recall(res.model, scenes[:20]):.3f}")
    from scripts.calibrate import heldout_ap

    print(f"train-set AP: {heldout_ap(res.model, scenes[:30]):.3f}")


if __name__ == "__main__":
    main()
