"""The full detector: shared convolutional backbone, fusion layers, proposal
head and per-region head, with a flat named-parameter registry."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .detector import DetHead, Detection, detection_backward, detection_forward, postprocess_detections
from .fusion import (
    TAP_ORDER,
    FeatureTap,
    FusionConfig,
    _roi_pool_backward_batch,
    concat_shrink,
    concat_shrink_backward,
    l2norm_scale,
    l2norm_scale_backward,
    make_l2norm,
    roi_pool,
    sync_downsample,
    sync_downsample_backward,
)
from .rpn import AnchorConfig, RpnHead, generate_anchors, propose, rpn_backward, rpn_forward
from .tensor import (
    ShapeError,
    conv2d,
    conv2d_backward,
    fully_connected,
    fully_connected_backward,
    make_conv,
    make_linear,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
)

STAGE_CHANNELS = (8, 16, 32, 64, 64)
TAP_STRIDES = {"tap3": 4, "tap4": 8, "tap5": 16}


@dataclass
class ModelConfig:
    stage_channels: tuple = STAGE_CHANNELS
    rpn_channels: int = 256
    head_width: int = 256
    fusion: FusionConfig = field(default_factory=FusionConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    fusion_mode: str = "multi"  # "multi" fuses tap3/4/5, "tap5" uses the last tap only

    def __post_init__(self):
        if self.fusion_mode not in ("multi", "tap5"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.fusion.shrink_channels != self.stage_channels[4]:
            raise ValueError(
                f"shrink_channels {self.fusion.shrink_channels} must equal the "
                f"last stage channel count {self.stage_channels[4]}"
            )


class MultiScaleDetector:
    """Two-stage face detector over fused multi-scale features.

    The backbone has five stages of two 3x3 convolutions each, with 2x2
    max-pooling after stages 1-4, so the third/fourth/fifth stage outputs
    sit at cumulative strides 4/8/16.  Those three taps feed both branches;
    their convolutions are shared, and so are the per-tap norm scales and
    the 1x1 channel-shrink convolution.
    """

    def __init__(self, cfg: ModelConfig = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        ch = self.cfg.stage_channels
        ins = (1,) + ch[:4]
        self.stages = []
        for i in range(5):
            self.stages.append(
                [make_conv(rng, ch[i], ins[i], 3), make_conv(rng, ch[i], ch[i], 3)]
            )
        fus = self.cfg.fusion
        if self.cfg.fusion_mode == "multi":
            self.norms = {
                "tap3": make_l2norm(ch[2], fus.gamma_init, fus.eps),
                "tap4": make_l2norm(ch[3], fus.gamma_init, fus.eps),
                "tap5": make_l2norm(ch[4], fus.gamma_init, fus.eps),
            }
            shrink_in = ch[2] + ch[3] + ch[4]
        else:
            self.norms = {}
            shrink_in = ch[4]
        self.shrink = make_conv(rng, fus.shrink_channels, shrink_in, 1, pad=0)
        k = self.cfg.anchors.per_cell
        self.rpn_head = RpnHead(
            conv=make_conv(rng, self.cfg.rpn_channels, fus.shrink_channels, 3),
            cls=make_conv(rng, 2 * k, self.cfg.rpn_channels, 1, pad=0),
            bbox=make_conv(rng, 4 * k, self.cfg.rpn_channels, 1, pad=0),
        )
        p = fus.roi_pool_size
        self.det_head = DetHead(
            fc1=make_linear(rng, fus.shrink_channels * p * p, self.cfg.head_width),
            fc2=make_linear(rng, self.cfg.head_width, self.cfg.head_width),
            cls=make_linear(rng, self.cfg.head_width, 2),
            bbox=make_linear(rng, self.cfg.head_width, 4),
        )
        self._anchor_cache = {}

    # ------------------------------------------------------------------
    # parameter registry

    def params(self) -> "OrderedDict[str, object]":
        reg = OrderedDict()
        for i, stage in enumerate(self.stages, start=1):
            for j, conv in enumerate(stage, start=1):
                reg[f"backbone.s{i}.c{j}.weight"] = conv.weight
                reg[f"backbone.s{i}.c{j}.bias"] = conv.bias
        for name in TAP_ORDER:
            if name in self.norms:
                reg[f"norm.{name}.gamma"] = self.norms[name].gamma
        reg["fusion.shrink.weight"] = self.shrink.weight
        reg["fusion.shrink.bias"] = self.shrink.bias
        reg["rpn.conv.weight"] = self.rpn_head.conv.weight
        reg["rpn.conv.bias"] = self.rpn_head.conv.bias
        reg["rpn.cls.weight"] = self.rpn_head.cls.weight
        reg["rpn.cls.bias"] = self.rpn_head.cls.bias
        reg["rpn.bbox.weight"] = self.rpn_head.bbox.weight
        reg["rpn.bbox.bias"] = self.rpn_head.bbox.bias
        for name in ("fc1", "fc2", "cls", "bbox"):
            lin = getattr(self.det_head, name)
            reg[f"det.{name}.weight"] = lin.weight
            reg[f"det.{name}.bias"] = lin.bias
        return reg

    def zero_grads(self):
        for t in self.params().values():
            t.ensure_grad()
            t.zero_grad()

    def save(self, path):
        ckpt.save_checkpoint(path, OrderedDict((k, v.data) for k, v in self.params().items()))

    def load(self, path):
        stored = ckpt.load_checkpoint(path)
        reg = self.params()
        if set(stored) != set(reg):
            missing = sorted(set(reg) - set(stored))
            extra = sorted(set(stored) - set(reg))
            raise ckpt.CheckpointError(f"parameter names differ (missing={missing}, extra={extra})")
        for name, tensor in reg.items():
            if stored[name].shape != tensor.data.shape:
                raise ckpt.CheckpointError(
                    f"{name}: stored shape {stored[name].shape} != model shape {tensor.data.shape}"
                )
            tensor.data[...] = stored[name]

    # ------------------------------------------------------------------
    # backbone

    def backbone_forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"backbone input must be NCHW with extents divisible by 16, got {x.shape}")
        caches = []
        taps = {}
        h = x
        for i, stage in enumerate(self.stages):
            for conv in stage:
                h, cc = conv2d(h, conv)
                h, rc = relu(h)
                caches.append(("conv", cc, rc))
            if i >= 2:
                taps[f"tap{i + 1}"] = h
            if i < 4:
                h, pc = maxpool2d(h, 2, 2)
                caches.append(("pool", pc))
        tap_list = [FeatureTap(name, taps[name], TAP_STRIDES[name]) for name in TAP_ORDER]
        return tap_list, caches

    def backbone_backward(self, tap_grads: dict, caches) -> np.ndarray:
        """Single backward sweep; tap gradients join at their stage outputs."""
        d = tap_grads["tap5"]
        stage_idx = 4
        for entry in reversed(caches):
            if entry[0] == "pool":
                d = maxpool2d_backward(d, entry[1])
                stage_idx -= 1
                if stage_idx in (2, 3):
                    d = d + tap_grads[f"tap{stage_idx + 1}"]
            else:
                _, cc, rc = entry
                d = relu_backward(d, rc)
                d = conv2d_backward(d, cc)
        return d

    # ------------------------------------------------------------------
    # dense fusion for the proposal branch

    def fused_map_forward(self, taps):
        if self.cfg.fusion_mode == "tap5":
            tap5 = taps[-1]
            out, cc = conv2d(tap5.map, self.shrink)
            return out, ("tap5", cc)
        downs, down_caches, norm_caches = [], [], []
        for tap in taps:
            d, dc = sync_downsample(tap, TAP_STRIDES["tap5"])
            n, nc = l2norm_scale(d, self.norms[tap.name])
            downs.append(n)
            down_caches.append(dc)
            norm_caches.append(nc)
        fused, cs_cache = concat_shrink(downs, self.shrink)
        return fused, ("multi", down_caches, norm_caches, cs_cache)

    def fused_map_backward(self, dfused: np.ndarray, cache, tap_grads: dict):
        if cache[0] == "tap5":
            tap_grads["tap5"] += conv2d_backward(dfused, cache[1])
            return
        _, down_caches, norm_caches, cs_cache = cache
        parts = concat_shrink_backward(dfused, cs_cache)
        for name, dc, nc, dpart in zip(TAP_ORDER, down_caches, norm_caches, parts):
            dd = l2norm_scale_backward(dpart, nc)
            tap_grads[name] += sync_downsample_backward(dd, dc)

    # ------------------------------------------------------------------
    # per-region branch

    def roi_forward(self, taps, rois: np.ndarray):
        if self.cfg.fusion_mode == "multi":
            return detection_forward(
                taps, rois, self.det_head, self.norms, self.shrink, self.cfg.fusion.roi_pool_size
            )
        return self._tap5_roi_forward(taps, rois)

    def roi_backward(self, dlogits, ddeltas, cache, tap_grads):
        if self.cfg.fusion_mode == "multi":
            detection_backward(dlogits, ddeltas, cache, tap_grads)
            return
        self._tap5_roi_backward(dlogits, ddeltas, cache, tap_grads)

    def _tap5_roi_forward(self, taps, rois):
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        r = rois.shape[0]
        if r == 0:
            return (np.zeros((0, 2)), np.zeros((0, 4))), None
        tap5 = taps[-1]
        p = self.cfg.fusion.roi_pool_size
        c = tap5.map.shape[1]
        pooled = np.empty((r, c, p, p))
        argmax = np.empty((r, c, p, p), dtype=np.int64)
        for i in range(r):
            pooled[i], argmax[i] = roi_pool(tap5.map[0], rois[i], tap5.stride, p)
        fused, cc = conv2d(pooled, self.shrink)
        flat = fused.reshape(r, -1)
        h1, c1 = fully_connected(flat, self.det_head.fc1)
        a1, r1 = relu(h1)
        h2, c2 = fully_connected(a1, self.det_head.fc2)
        a2, r2 = relu(h2)
        logits, c3 = fully_connected(a2, self.det_head.cls)
        deltas, c4 = fully_connected(a2, self.det_head.bbox)
        return (logits, deltas), (argmax, cc, fused.shape, c1, r1, c2, r2, c3, c4)

    def _tap5_roi_backward(self, dlogits, ddeltas, cache, tap_grads):
        if cache is None:
            return
        argmax, cc, fused_shape, c1, r1, c2, r2, c3, c4 = cache
        da2 = fully_connected_backward(dlogits, c3) + fully_connected_backward(ddeltas, c4)
        dh2 = relu_backward(da2, r2)
        da1 = fully_connected_backward(dh2, c2)
        dh1 = relu_backward(da1, r1)
        dflat = fully_connected_backward(dh1, c1)
        dpool = conv2d_backward(dflat.reshape(fused_shape), cc)
        _roi_pool_backward_batch(dpool, argmax, tap_grads["tap5"][0])

    # ------------------------------------------------------------------
    # inference

    def anchors_for(self, feat_h: int, feat_w: int) -> np.ndarray:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(feat_h, feat_w, self.cfg.anchors)
        return self._anchor_cache[key]

    def detect(
        self,
        image: np.ndarray,
        orig_w: int,
        orig_h: int,
        score_thresh: float = 0.8,
        det_nms_thresh: float = 0.3,
        rpn_nms_thresh: float = 0.7,
        pre_nms_top_n: int = 2000,
        post_nms_top_n: int = 300,
        min_size: float = 4.0,
    ) -> list[Detection]:
        """Run the full pipeline on one padded image tensor."""
        taps, _ = self.backbone_forward(image)
        fused, _ = self.fused_map_forward(taps)
        (logits, deltas), _ = rpn_forward(fused, self.rpn_head)
        anchors = self.anchors_for(fused.shape[2], fused.shape[3])
        proposals = propose(
            logits,
            deltas,
            anchors,
            orig_w,
            orig_h,
            pre_nms_top_n=pre_nms_top_n,
            post_nms_top_n=post_nms_top_n,
            nms_thresh=rpn_nms_thresh,
            min_size=min_size,
            k=self.cfg.anchors.per_cell,
        )
        if not proposals:
            return []
        rois = np.stack([p.box for p in proposals])
        (cls_logits, box_deltas), _ = self.roi_forward(taps, rois)
        return postprocess_detections(
            cls_logits, box_deltas, rois, score_thresh, det_nms_thresh, orig_w, orig_h
        )

    def new_tap_grads(self, taps) -> dict:
        return {t.name: np.zeros_like(t.map) for t in taps}
