"""Multi-label classification head: context gating + mixture of experts.

The flattened video code x is gated elementwise, y = sigmoid(Wx + b) * x,
then each label gets an independent mixture of logistic experts,
p_c = sum_e softmax_gate(y)_ce * sigmoid(expert_ce . y).  A second gating
block over the label probabilities is optional.  Labels are independent
(multi-label), so there is no softmax across classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .prng import Stream

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    num_classes: int
    num_experts: int = 2
    gate_input: bool = True
    gate_output: bool = True

    def validate(self) -> None:
        if self.input_dim < 1 or self.num_classes < 1 or self.num_experts < 1:
            raise ValueError("dims and expert count must be >= 1")


@dataclass
class ClassifierHead:
    cfg: HeadConfig
    gate_in_w: np.ndarray | None  # (H, H)
    gate_in_b: np.ndarray | None  # (H,)
    expert_w: np.ndarray  # (C, E, H)
    expert_b: np.ndarray  # (C, E)
    gate_exp_w: np.ndarray  # (C, E, H)
    gate_exp_b: np.ndarray  # (C, E)
    gate_out_w: np.ndarray | None  # (C, C)
    gate_out_b: np.ndarray | None  # (C,)

    def trainable(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.cfg.gate_input:
            out["gate_in_w"] = self.gate_in_w
            out["gate_in_b"] = self.gate_in_b
        out["expert_w"] = self.expert_w
        out["expert_b"] = self.expert_b
        out["gate_exp_w"] = self.gate_exp_w
        out["gate_exp_b"] = self.gate_exp_b
        if self.cfg.gate_output:
            out["gate_out_w"] = self.gate_out_w
            out["gate_out_b"] = self.gate_out_b
        return out


def init_head(cfg: HeadConfig, seed: int = 0) -> ClassifierHead:
    """Small random weights, zero biases."""
    cfg.validate()
    h, c, e = cfg.input_dim, cfg.num_classes, cfg.num_experts
    s = Stream(seed, "head")
    scale = 1.0 / np.sqrt(h)
    return ClassifierHead(
        cfg=cfg,
        gate_in_w=s.normal((h, h)) * scale if cfg.gate_input else None,
        gate_in_b=np.zeros(h) if cfg.gate_input else None,
        expert_w=s.normal((c, e, h)) * scale,
        expert_b=np.zeros((c, e)),
        gate_exp_w=s.normal((c, e, h)) * scale,
        gate_exp_b=np.zeros((c, e)),
        gate_out_w=s.normal((c, c)) / np.sqrt(c) if cfg.gate_output else None,
        gate_out_b=np.zeros(c) if cfg.gate_output else None,
    )


def head_graph(cfg: HeadConfig, hvars: dict[str, Var], x: Var) -> Var:
    """(B, C) per-label probabilities from a (B, H) code batch."""
    b_rows = x.value.shape[0]
    c, e = cfg.num_classes, cfg.num_experts
    y = x
    if cfg.gate_input:
        gate = ag.sigmoid(ag.add(ag.matmul(y, ag.transpose(hvars["gate_in_w"])), hvars["gate_in_b"]))
        y = ag.mul(gate, y)

    def per_label_affine(w_name: str, b_name: str) -> Var:
        w2d = ag.reshape(hvars[w_name], (c * e, -1))
        logits = ag.add(ag.matmul(y, ag.transpose(w2d)), ag.reshape(hvars[b_name], (c * e,)))
        return ag.reshape(logits, (b_rows, c, e))

    expert_p = ag.sigmoid(per_label_affine("expert_w", "expert_b"))
    gates = ag.softmax(per_label_affine("gate_exp_w", "gate_exp_b"), axis=2)
    probs = ag.vsum(ag.mul(gates, expert_p), axis=2)

    if cfg.gate_output:
        gate2 = ag.sigmoid(ag.add(ag.matmul(probs, ag.transpose(hvars["gate_out_w"])), hvars["gate_out_b"]))
        probs = ag.mul(gate2, probs)
    return probs


def forward_head(head: ClassifierHead, code: np.ndarray) -> np.ndarray:
    """Per-label probabilities for one flattened code."""
    code = np.asarray(code, dtype=np.float64).reshape(1, -1)
    if code.shape[1] != head.cfg.input_dim:
        raise ValueError(f"code dim {code.shape[1]} != head input dim {head.cfg.input_dim}")
    hvars = {name: Var(arr) for name, arr in head.trainable().items()}
    return head_graph(head.cfg, hvars, Var(code)).value[0]


def multi_hot(label_lists, num_classes: int) -> np.ndarray:
    """(B, C) 0/1 target matrix from per-video label lists."""
    out = np.zeros((len(label_lists), num_classes))
    for i, labels in enumerate(label_lists):
        for lab in labels:
            if not 0 <= int(lab) < num_classes:
                raise ValueError(f"label {lab} out of range [0, {num_classes})")
            out[i, int(lab)] = 1.0
    return out


def bce_graph(probs: Var, targets: np.ndarray) -> Var:
    """Mean per-label binary cross entropy with probability clamping."""
    targets = np.asarray(targets, dtype=np.float64)
    p = ag.clip(probs, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = ag.mul(ag.log(p), targets)
    neg = ag.mul(ag.log(ag.sub(1.0, p)), 1.0 - targets)
    return ag.mul(ag.vmean(ag.add(pos, neg)), -1.0)


def bce_loss(pred: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss value and gradient w.r.t. the predictions."""
    p = Var(np.asarray(pred, dtype=np.float64))
    loss = bce_graph(p, targets)
    ag.backward(loss)
    return float(loss.value), p.grad
