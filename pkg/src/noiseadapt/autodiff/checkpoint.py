"""Segment-level gradient checkpointing.

A checkpointed segment stores only its input tensors; the segment body runs
untracked at forward time and is replayed under gradient tracking during
backward. The segment function must be deterministic given its inputs; any
randomness has to be passed in as an explicit input tensor. Because the
replay repeats the exact same arithmetic, checkpointed gradients match the
non-checkpointed ones bit for bit.

Parameters used inside the segment body (closed-over tensors that are not
explicit inputs) are treated as constants: no gradient flows to them.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonDeterministicSegment
from .tensor import (
    Tensor,
    _acc,
    _from_op,
    _seed_backward,
    enable_grad,
    grad_enabled,
    no_grad,
)


def checkpoint(fn, *inputs, verify: bool = False):
    """Run fn(*inputs) saving only the inputs for backward.

    fn maps input Tensors to a Tensor or a tuple of Tensors. With
    verify=True the forward pass is run twice and compared bit-identically
    to detect a non-deterministic segment body (costs one extra forward).
    """
    in_tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    datas = [t.data for t in in_tensors]

    def run():
        with no_grad():
            return fn(*[Tensor(d) for d in datas])

    out = run()
    multi = isinstance(out, tuple)
    outs = out if multi else (out,)

    if verify:
        out2 = run()
        outs2 = out2 if isinstance(out2, tuple) else (out2,)
        if len(outs) != len(outs2) or any(
                not np.array_equal(a.data, b.data) for a, b in zip(outs, outs2)):
            raise NonDeterministicSegment("segment replay differs from forward")

    if not (grad_enabled() and any(t.requires_grad for t in in_tensors)):
        return out

    header = sum(d.size for d in datas)

    def make_bw(out_index):
        def bw(g, grads):
            leaves = [Tensor(d, requires_grad=True) for d in datas]
            with enable_grad():
                replay = fn(*leaves)
            replay_outs = replay if isinstance(replay, tuple) else (replay,)
            _seed_backward(replay_outs[out_index], g)
            for leaf, src in zip(leaves, in_tensors):
                if src.requires_grad and leaf.grad is not None:
                    _acc(grads, src, leaf.grad)
        return bw

    wrapped = tuple(
        _from_op(o.data, tuple(in_tensors), make_bw(i), "checkpoint", n_saved=header)
        for i, o in enumerate(outs)
    )
    return wrapped if multi else wrapped[0]
