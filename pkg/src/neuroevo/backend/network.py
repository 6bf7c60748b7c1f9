"""Executes a CompiledModel: forward pass, backward pass and parameter initialization."""

from __future__ import annotations

import numpy as np

from ..compiler import CompiledModel, apply_reshape, reshape_backward
from ..dna import BN_RELU, CONV
from . import ops
from .weights import WeightBundle, he_initialize


def initialize_slots(model: CompiledModel, rng: np.random.Generator,
                     names: list[str] | None = None) -> WeightBundle:
    """Fresh values for the given slots (all slots when ``names`` is None)."""
    out: WeightBundle = {}
    for name in names if names is not None else list(model.slots):
        spec = model.slots[name]
        if spec.init == "he":
            out[name] = he_initialize(spec.shape, spec.init_scale, rng, fan_in=spec.fan_in)
        elif spec.init == "ones":
            out[name] = np.ones(spec.shape, dtype=np.float32)
        else:
            out[name] = np.zeros(spec.shape, dtype=np.float32)
    return out


class Network:
    def __init__(self, model: CompiledModel, weights: WeightBundle):
        missing = [k for k in model.slots if k not in weights]
        if missing:
            raise KeyError(f"weights missing for slots: {missing[:5]}")
        for name, spec in model.slots.items():
            if tuple(weights[name].shape) != spec.shape:
                raise ValueError(f"{name}: weight {weights[name].shape} vs slot {spec.shape}")
        self.model = model
        self.weights = weights
        self._caches: dict = {}

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        model, w = self.model, self.weights
        acts = {model.input_vertex: x}
        caches = {}
        for v in model.vertices:
            if v.vertex_id == model.input_vertex:
                continue
            total = None
            for eid in v.in_edges:
                e = model.edges[eid]
                y = acts[e.from_vertex]
                if e.edge_type == CONV:
                    y, caches[("conv", eid)] = ops.conv2d(y, w[e.weight_name], e.stride)
                if not e.directive.is_identity:
                    y = apply_reshape(y, e.directive)
                total = y if total is None else ops.add(total, y)
            if v.vertex_type == BN_RELU:
                total, caches[("bn", v.vertex_id)] = ops.batch_norm(
                    total, w[v.bn_name("gamma")], w[v.bn_name("beta")],
                    w[v.bn_name("moving_mean")], w[v.bn_name("moving_variance")], training)
                total, caches[("relu", v.vertex_id)] = ops.relu(total, v.leakiness)
            acts[v.vertex_id] = total
        feats = acts[model.output_vertex]
        flat = feats.reshape(feats.shape[0], -1)
        logits, caches["dense"] = ops.dense(flat, w[model.classifier_weights],
                                            w[model.classifier_biases])
        self._caches = caches
        self._shapes = {k: a.shape for k, a in acts.items()}
        return logits

    def backward(self, dlogits: np.ndarray) -> WeightBundle:
        """Gradients for every trainable slot, from the last ``forward`` call."""
        model, caches = self.model, self._caches
        grads: WeightBundle = {}
        dflat, grads[model.classifier_weights], grads[model.classifier_biases] = \
            ops.dense_backward(dlogits, caches["dense"])
        dacts = {model.output_vertex: dflat.reshape(self._shapes[model.output_vertex])}
        for v in reversed(model.vertices):
            if v.vertex_id == model.input_vertex:
                continue
            g = dacts.pop(v.vertex_id)
            if v.vertex_type == BN_RELU:
                g = ops.relu_backward(g, caches[("relu", v.vertex_id)])
                g, grads[v.bn_name("gamma")], grads[v.bn_name("beta")] = \
                    ops.batch_norm_backward(g, caches[("bn", v.vertex_id)])
            for _ in range(len(v.in_edges) - 1):
                ops.add_backward_count(g)
            for eid in v.in_edges:
                e = model.edges[eid]
                ge = g
                if not e.directive.is_identity:
                    ge = reshape_backward(ge, e.directive)
                if e.edge_type == CONV:
                    ge, grads[e.weight_name] = ops.conv2d_backward(ge, caches[("conv", eid)])
                if e.from_vertex in dacts:
                    dacts[e.from_vertex] = ops.add(dacts[e.from_vertex], ge)
                else:
                    dacts[e.from_vertex] = ge
        self._caches = {}
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        preds = []
        for i in range(0, len(x), batch_size):
            logits = self.forward(x[i:i + batch_size], training=False)
            preds.append(logits.argmax(axis=1))
        self._caches = {}
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
