"""Interaction feature extractors and their aggregation.

Three per-pedestrian features are computed from a frame (or a stack of
frames along a leading time axis):

* spatial embedding of the pedestrian's one-step displacement,
* social feature pooled over pedestrian-pedestrian relative positions,
* vehicle interaction feature combining per-pair attention over
  pedestrian-vehicle relative positions with embedded vehicle movement
  states.

All geometric inputs are differences, so every feature is invariant under
a common translation of the scene. Pedestrians with no neighbors and frames
with no vehicles yield exact zero features, which makes the no-interaction
configuration coincide with the plain backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Node, Parameter, constant


@dataclass
class FeatureConfig:
    embed_dim: int = 16
    social_mlp: tuple[int, ...] = (32, 16)
    pvi_mlp: tuple[int, ...] = (32, 16)
    pvi_state_dim: int = 16
    use_social: bool = True
    use_pvi: bool = True
    use_velocity: bool = False
    aggregation: str = "concat"  # "concat" | "weighted_sum", fixed per model

    def __post_init__(self):
        if self.embed_dim < 1 or self.pvi_state_dim < 1:
            raise ValueError("feature widths must be >= 1")
        if any(w < 1 for w in self.social_mlp) or any(w < 1 for w in self.pvi_mlp):
            raise ValueError("MLP widths must be >= 1")
        if self.aggregation not in ("concat", "weighted_sum"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


class FeatureExtractor:
    """Owns the feature parameters for one model instance.

    ``variant`` ("lstm" or "conv") picks how the vehicle interaction is
    aggregated: the lstm variant embeds movement states, combines them with
    per-pair attention by elementwise product and max-pools over vehicles;
    the conv variant turns attention into softmax weights over vehicles and
    takes the weighted sum of movement states. Disabled feature blocks are
    zero-width: no parameters exist for them and the aggregated vector
    simply omits them.
    """

    def __init__(self, cfg: FeatureConfig, variant: str,
                 rng: np.random.Generator, params: dict[str, Parameter]):
        if variant not in ("lstm", "conv"):
            raise ValueError(f"unknown variant {variant!r}")
        self.cfg = cfg
        self.variant = variant
        self.params = params
        self.att_dim = cfg.pvi_mlp[-1]
        self.social_dim = cfg.social_mlp[-1] if cfg.use_social else 0
        if cfg.use_pvi:
            self.pvi_dim = 2 * self.att_dim if variant == "lstm" else cfg.pvi_state_dim
        else:
            self.pvi_dim = 0
        self.pair_in = 4 if cfg.use_velocity else 2

        self._add("feat.embed", 2, cfg.embed_dim, rng)
        if cfg.use_social:
            widths = [2] + list(cfg.social_mlp)
            for i in range(len(widths) - 1):
                self._add(f"feat.social.l{i}", widths[i], widths[i + 1], rng)
        if cfg.use_pvi:
            widths = [self.pair_in] + list(cfg.pvi_mlp)
            for i in range(len(widths) - 1):
                self._add(f"feat.pvi.pair.l{i}", widths[i], widths[i + 1], rng)
            self._add("feat.pvi.move", 2, cfg.pvi_state_dim, rng)
            if variant == "lstm":
                self._add("feat.pvi.move_embed", cfg.pvi_state_dim, self.att_dim, rng)
            else:
                self._add("feat.pvi.score", self.att_dim, 1, rng)
        if cfg.aggregation == "weighted_sum" and cfg.use_social:
            self.params["feat.agg.social_proj.w"] = Parameter(
                "feat.agg.social_proj.w", tc.init_uniform(rng, (self.social_dim, cfg.embed_dim),
                                                          self.social_dim))
            self.params["feat.agg.social_proj.b"] = Parameter(
                "feat.agg.social_proj.b", np.zeros(cfg.embed_dim))
            self.params["feat.agg.gate"] = Parameter("feat.agg.gate", np.array([0.5, 0.5]))

    @property
    def agg_dim(self) -> int:
        if self.cfg.aggregation == "concat":
            return self.cfg.embed_dim + self.social_dim + self.pvi_dim
        return self.cfg.embed_dim + self.pvi_dim

    def _add(self, stem: str, fan_in: int, fan_out: int, rng) -> None:
        self.params[f"{stem}.w"] = Parameter(f"{stem}.w",
                                             tc.init_uniform(rng, (fan_in, fan_out), fan_in))
        self.params[f"{stem}.b"] = Parameter(f"{stem}.b", np.zeros(fan_out))

    def _mlp(self, x: Node, stem: str, n_layers: int) -> Node:
        """Embedding + MLP chain: ReLU after every layer but the last."""
        for i in range(n_layers):
            x = tc.linear(x, self.params[f"{stem}.l{i}.w"], self.params[f"{stem}.l{i}.b"])
            if i < n_layers - 1:
                x = tc.relu(x)
        return x

    # -- the extractors ----------------------------------------------------

    def spatial_embed(self, dx) -> Node:
        """Embed one-step displacements [..., n_p, 2] -> [..., n_p, embed_dim]."""
        x = dx if isinstance(dx, Node) else constant(dx)
        return tc.relu(tc.linear(x, self.params["feat.embed.w"], self.params["feat.embed.b"]))

    def social_feature(self, positions: np.ndarray, present: np.ndarray | None = None) -> Node:
        """Max-pooled embedding of relative positions to the other pedestrians.

        ``positions`` is [..., n_p, 2]; ``present`` marks which pedestrians
        exist in each frame (absent ones are skipped as neighbors). Rows with
        no neighbor come back as exact zeros.
        """
        pos = np.asarray(positions, dtype=np.float64)
        n_p = pos.shape[-2]
        if present is None:
            present = np.ones(pos.shape[:-1], dtype=bool)
        if not self.cfg.use_social:
            raise ValueError("social feature disabled in this configuration")
        if n_p == 0:
            return constant(np.zeros(pos.shape[:-2] + (0, self.social_dim)))
        d = pos[..., None, :, :] - pos[..., :, None, :]  # d[i, k] = pos_k - pos_i
        mask = present[..., None, :] & ~np.eye(n_p, dtype=bool)
        h = self._mlp(constant(d), "feat.social", len(self.cfg.social_mlp))
        return tc.masked_max(h, mask, empty_zero=True)

    @staticmethod
    def pvi_rel_positions(ped: np.ndarray, veh: np.ndarray) -> np.ndarray:
        """d[i, j] = vehicle_j - pedestrian_i, shape [..., n_p, n_v, 2]."""
        ped = np.asarray(ped, dtype=np.float64)
        veh = np.asarray(veh, dtype=np.float64)
        return veh[..., None, :, :] - ped[..., :, None, :]

    def pvi_attention(self, d: np.ndarray, dv_rel: np.ndarray | None = None) -> Node:
        """Per-pair attention features from relative positions [..., n_p, n_v, 2].

        With relative-velocity input enabled, per-pair displacement
        differences are concatenated to ``d`` before embedding.
        """
        x = np.asarray(d, dtype=np.float64)
        if self.cfg.use_velocity:
            if dv_rel is None:
                raise ValueError("use_velocity set but no relative velocities given")
            x = np.concatenate([x, np.asarray(dv_rel, dtype=np.float64)], axis=-1)
        return self._mlp(constant(x), "feat.pvi.pair", len(self.cfg.pvi_mlp))

    def vehicle_movement_state(self, dv: np.ndarray) -> Node:
        """Embed vehicle one-step displacements [..., n_v, 2] -> [..., n_v, state]."""
        return tc.relu(tc.linear(constant(dv), self.params["feat.pvi.move.w"],
                                 self.params["feat.pvi.move.b"]))

    def pvi_feature(self, m: Node, a: Node, pair_mask: np.ndarray) -> Node:
        """Aggregate movement states and pair attention into per-pedestrian features.

        ``pair_mask`` [..., n_p, n_v] marks which vehicle is present for each
        pair; frames with no vehicle yield exact zeros.
        """
        if self.variant == "lstm":
            me = tc.relu(tc.linear(m, self.params["feat.pvi.move_embed.w"],
                                   self.params["feat.pvi.move_embed.b"]))
            u = tc.pair_product(a, me)
            pooled_u = tc.masked_max(u, pair_mask, empty_zero=True)
            pooled_a = tc.masked_max(a, pair_mask, empty_zero=True)
            return tc.concat([pooled_u, pooled_a], axis=-1)
        score = tc.linear(a, self.params["feat.pvi.score.w"], self.params["feat.pvi.score.b"])
        score = tc.reshape(score, score.value.shape[:-1])
        weights = tc.softmax(score, mask=pair_mask)
        return tc.grouped_weighted_sum(weights, m)

    def pvi_block(self, ped_pos: np.ndarray, veh_pos: np.ndarray, veh_dv: np.ndarray,
                  veh_present: np.ndarray, ped_dx: np.ndarray | None = None) -> Node:
        """Composed vehicle-interaction pipeline for one frame or a frame stack.

        ``ped_pos`` [..., n_p, 2], ``veh_pos``/``veh_dv`` [..., n_v, 2],
        ``veh_present`` [..., n_v]. Returns [..., n_p, pvi_dim].
        """
        n_p = ped_pos.shape[-2]
        n_v = veh_pos.shape[-2]
        lead = ped_pos.shape[:-2]
        if n_v == 0:
            return constant(np.zeros(lead + (n_p, self.pvi_dim)))
        d = self.pvi_rel_positions(ped_pos, veh_pos)
        dv_rel = None
        if self.cfg.use_velocity:
            if ped_dx is None:
                raise ValueError("use_velocity requires pedestrian displacements")
            dv_rel = np.asarray(veh_dv)[..., None, :, :] - np.asarray(ped_dx)[..., :, None, :]
        a = self.pvi_attention(d, dv_rel)
        m = self.vehicle_movement_state(veh_dv)
        pair_mask = np.broadcast_to(np.asarray(veh_present, dtype=bool)[..., None, :],
                                    lead + (n_p, n_v))
        return self.pvi_feature(m, a, pair_mask)

    def pvi_block_fused(self, ped_pos: np.ndarray, veh_pos: np.ndarray, veh_dv: np.ndarray,
                        veh_present: np.ndarray, ped_dx: np.ndarray | None = None) -> Node:
        """One-node version of the conv-variant pvi_block (same math).

        The conv forward pass runs this instead of the composed ops so the
        vehicle stream adds a single kernel launch; equivalence against
        pvi_block is pinned by tests.
        """
        assert self.variant == "conv"
        n_p = ped_pos.shape[-2]
        n_v = veh_pos.shape[-2]
        lead = ped_pos.shape[:-2]
        if n_v == 0:
            return constant(np.zeros(lead + (n_p, self.pvi_dim)))
        x = self.pvi_rel_positions(ped_pos, veh_pos)
        if self.cfg.use_velocity:
            if ped_dx is None:
                raise ValueError("use_velocity requires pedestrian displacements")
            dv_rel = np.asarray(veh_dv)[..., None, :, :] - np.asarray(ped_dx)[..., :, None, :]
            x = np.concatenate([x, dv_rel], axis=-1)
        mask = np.broadcast_to(np.asarray(veh_present, dtype=bool)[..., None, :],
                               lead + (n_p, n_v))
        dv = np.asarray(veh_dv, dtype=np.float64)

        n_layers = len(self.cfg.pvi_mlp)
        layers = [(self.params[f"feat.pvi.pair.l{i}.w"], self.params[f"feat.pvi.pair.l{i}.b"])
                  for i in range(n_layers)]
        ws, bs = self.params["feat.pvi.score.w"], self.params["feat.pvi.score.b"]
        wm, bm = self.params["feat.pvi.move.w"], self.params["feat.pvi.move.b"]

        # forward with cached intermediates
        acts = [x]
        h = x
        for i, (w, b) in enumerate(layers):
            h = h @ w.value + b.value
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        sc = (h @ ws.value + bs.value)[..., 0]
        zmax = np.where(mask, sc, -np.inf).max(axis=-1, keepdims=True)
        any_valid = mask.any(axis=-1, keepdims=True)
        zmax = np.where(any_valid, zmax, 0.0)
        e = np.where(mask, np.exp(sc - zmax), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        w_att = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
        m_pre = dv @ wm.value + bm.value
        m = np.maximum(m_pre, 0.0)
        out = w_att @ m

        parents = tuple(p for pair in layers for p in pair) + (ws, bs, wm, bm)

        def bwd(g):
            dw_att = g @ m.swapaxes(-1, -2)
            dm = w_att.swapaxes(-1, -2) @ g
            dm_pre = dm * (m_pre > 0.0)
            tc._acc(wm, dv.reshape(-1, 2).T @ dm_pre.reshape(-1, dm_pre.shape[-1]))
            tc._acc(bm, dm_pre.reshape(-1, dm_pre.shape[-1]).sum(axis=0))
            dsc = w_att * (dw_att - (dw_att * w_att).sum(axis=-1, keepdims=True))
            da = dsc[..., None] * ws.value[:, 0]
            tc._acc(ws, (acts[-1].reshape(-1, acts[-1].shape[-1]).T
                         @ dsc.reshape(-1)[:, None]))
            tc._acc(bs, np.array([dsc.sum()]))
            dh = da
            for i in range(n_layers - 1, -1, -1):
                w, b = layers[i]
                if i < n_layers - 1:
                    dh = dh * (acts[i + 1] > 0.0)
                tc._acc(w, acts[i].reshape(-1, acts[i].shape[-1]).T
                        @ dh.reshape(-1, dh.shape[-1]))
                tc._acc(b, dh.reshape(-1, dh.shape[-1]).sum(axis=0))
                dh = dh @ w.value.T

        return tc._new(out, parents, bwd)

    def aggregate(self, e: Node, s: Node | None, v: Node | None) -> Node:
        """Combine the per-pedestrian features into one vector.

        concat mode stacks [e | s | v] with disabled blocks omitted; the
        weighted_sum mode blends e with a projection of s through a learned
        two-way gate and concatenates v.
        """
        if self.cfg.aggregation == "concat":
            parts = [e]
            if self.cfg.use_social:
                parts.append(s)
            if self.cfg.use_pvi:
                parts.append(v)
            return parts[0] if len(parts) == 1 else tc.concat(parts, axis=-1)
        blended = e
        if self.cfg.use_social:
            proj = tc.linear(s, self.params["feat.agg.social_proj.w"],
                             self.params["feat.agg.social_proj.b"])
            blended = tc.gate_blend(e, proj, self.params["feat.agg.gate"])
        if self.cfg.use_pvi:
            return tc.concat([blended, v], axis=-1)
        return blended
