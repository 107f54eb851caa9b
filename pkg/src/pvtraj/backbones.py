"""Prediction backbones: LSTM encoder-decoder and temporal-conv extrapolator.

Both consume aggregated interaction features and emit a bivariate Gaussian
per pedestrian per future step (means, exp-mapped scales, tanh-mapped
correlation), from which candidate futures are sampled. The LSTM variant
computes interaction features once at the last observed step and rolls a
decoder that feeds back the embedded mean displacement; the conv variant
computes features at every observed step, runs a temporal convolution per
pedestrian, and maps the 8 observed steps to all 12 future steps in one
pass through a time-as-channels convolutional extrapolator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .features import FeatureConfig, FeatureExtractor
from .tensorcore import Node, Parameter, constant
from .trajdata import T_OBS, T_PRED, SequenceSample, displacements

LSTM = "lstm"
CONV = "conv"


@dataclass
class BackboneConfig:
    kind: str = LSTM
    hidden_dim: int = 32
    tcn_layers: int = 2
    tcn_channels: int = 32
    tcn_kernel: int = 3
    extrap_layers: int = 3
    extrap_kernel: int = 3
    decoder_steps: int = T_PRED
    teacher_forcing: bool = False

    def __post_init__(self):
        if self.kind not in (LSTM, CONV):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.decoder_steps != T_PRED:
            raise ValueError(f"decoder_steps must equal {T_PRED}")
        if self.tcn_kernel % 2 == 0 or self.extrap_kernel % 2 == 0:
            raise ValueError("convolution kernels must be odd")


@dataclass
class GaussianParams:
    """Per-pedestrian per-step bivariate Gaussian over displacements."""

    mu: np.ndarray     # [n_p, steps, 2]
    sigma: np.ndarray  # [n_p, steps, 2], > 0
    rho: np.ndarray    # [n_p, steps], in (-1, 1)

    @classmethod
    def from_array(cls, raw: np.ndarray) -> "GaussianParams":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw[..., 0:2].copy(), raw[..., 2:4].copy(), raw[..., 4].copy())

    @property
    def n_ped(self) -> int:
        return self.mu.shape[0]

    @property
    def steps(self) -> int:
        return self.mu.shape[1]


@dataclass
class PredictionSet:
    """Sampled absolute futures plus the distribution they came from."""

    samples: np.ndarray  # [n_samples, n_p, steps, 2]
    params: GaussianParams
    last_obs: np.ndarray  # [n_p, 2]
    seed: int

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def mean_trajectory(self) -> np.ndarray:
        """Absolute trajectory of the distribution means, [n_p, steps, 2]."""
        return self.last_obs[:, None, :] + np.cumsum(self.params.mu, axis=1)


def default_feature_config(kind: str, **overrides) -> FeatureConfig:
    """FeatureConfig with the aggregation style canonical for the backbone."""
    agg = "concat" if kind == LSTM else "weighted_sum"
    return FeatureConfig(aggregation=overrides.pop("aggregation", agg), **overrides)


class TrajectoryPredictor:
    """One trained model: feature extractor plus a prediction backbone.

    Parameters are created in a fixed order from a single seeded generator,
    so (config, seed) fully determines the initial weights, and disabled
    feature blocks neither create parameters nor consume random draws.
    """

    def __init__(self, fcfg: FeatureConfig, bcfg: BackboneConfig, seed: int = 0):
        self.fcfg = fcfg
        self.bcfg = bcfg
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        self.features = FeatureExtractor(fcfg, bcfg.kind, rng, self.params)
        agg = self.features.agg_dim
        H = bcfg.hidden_dim
        if bcfg.kind == LSTM:
            self._lstm("enc", fcfg.embed_dim, H, rng)
            self._linear("dec.init", agg, H, rng)
            self._linear("dec.embed", 2, fcfg.embed_dim, rng)
            self._lstm("dec", fcfg.embed_dim, H, rng)
            self._linear("dec.head", H, 5, rng)
        else:
            c_in = agg
            for i in range(bcfg.tcn_layers):
                self._conv(f"tcn.l{i}", bcfg.tcn_channels, c_in, bcfg.tcn_kernel, rng)
                c_in = bcfg.tcn_channels
            for i in range(bcfg.extrap_layers):
                cin = T_OBS if i == 0 else T_PRED
                self._conv(f"extrap.l{i}", T_PRED, cin, bcfg.extrap_kernel, rng)
            self._linear("conv.head", bcfg.tcn_channels, 5, rng)

    # -- parameter bookkeeping ----------------------------------------------

    def _linear(self, stem, fan_in, fan_out, rng):
        self.params[f"{stem}.w"] = Parameter(f"{stem}.w",
                                             tc.init_uniform(rng, (fan_in, fan_out), fan_in))
        self.params[f"{stem}.b"] = Parameter(f"{stem}.b", np.zeros(fan_out))

    def _lstm(self, stem, d_in, d_h, rng):
        self.params[f"{stem}.wx"] = Parameter(f"{stem}.wx",
                                              tc.init_uniform(rng, (d_in, 4 * d_h), d_in))
        self.params[f"{stem}.wh"] = Parameter(f"{stem}.wh",
                                              tc.init_uniform(rng, (d_h, 4 * d_h), d_h))
        self.params[f"{stem}.b"] = Parameter(f"{stem}.b", np.zeros(4 * d_h))

    def _conv(self, stem, c_out, c_in, k, rng):
        self.params[f"{stem}.k"] = Parameter(f"{stem}.k",
                                             tc.init_uniform(rng, (c_out, c_in, k), c_in * k))
        self.params[f"{stem}.b"] = Parameter(f"{stem}.b", np.zeros(c_out))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"parameter names do not match: {sorted(missing)}")
        for name, arr in state.items():
            if arr.shape != self.params[name].value.shape:
                raise tc.ShapeError(f"{name}: {arr.shape} vs {self.params[name].value.shape}")
            self.params[name].value = np.asarray(arr, dtype=np.float64).copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _p(self, name) -> Parameter:
        return self.params[name]

    # -- shared input preparation --------------------------------------------

    @staticmethod
    def _prepare(sample: SequenceSample):
        tgt = np.flatnonzero(sample.targets)
        if len(tgt) == 0:
            raise ValueError("sample has no prediction target")
        obs = sample.ped_obs[tgt]                      # [n_t, T_OBS, 2]
        dx = displacements(obs)                        # zero first step
        veh_dv = np.zeros_like(sample.veh_obs)
        if sample.n_veh:
            valid = sample.veh_mask[:, 1:] & sample.veh_mask[:, :-1]
            veh_dv[:, 1:] = np.where(valid[..., None],
                                     sample.veh_obs[:, 1:] - sample.veh_obs[:, :-1], 0.0)
        return tgt, obs, dx, veh_dv

    def truth_displacements(self, sample: SequenceSample) -> np.ndarray:
        """Future ground-truth displacements for the targets, [n_t, T_PRED, 2]."""
        tgt = np.flatnonzero(sample.targets)
        future = sample.ped_future[tgt]
        last = sample.ped_obs[tgt][:, -1]
        return np.diff(np.concatenate([last[:, None, :], future], axis=1), axis=1)

    # -- forward passes --------------------------------------------------------

    def forward(self, sample: SequenceSample, teacher: np.ndarray | None = None) -> Node:
        """Gaussian parameters node [n_t, T_PRED, 5] for the sample's targets."""
        if self.bcfg.kind == LSTM:
            return self._forward_lstm(sample, teacher)
        return self._forward_conv(sample)

    def _forward_lstm(self, sample: SequenceSample, teacher: np.ndarray | None) -> Node:
        f = self.features
        tgt, obs, dx, veh_dv = self._prepare(sample)
        n_t = len(tgt)
        H = self.bcfg.hidden_dim
        h = constant(np.zeros((n_t, H)))
        c = constant(np.zeros((n_t, H)))
        e_t = None
        for t in range(T_OBS):
            e_t = f.spatial_embed(dx[:, t])
            h, c = tc.lstm_cell(e_t, h, c, self._p("enc.wx"), self._p("enc.wh"),
                                self._p("enc.b"))
        last = T_OBS - 1
        s = v = None
        if self.fcfg.use_social:
            s_all = f.social_feature(sample.ped_obs[:, last], sample.ped_mask[:, last])
            s = tc.take_rows(s_all, tgt)
        if self.fcfg.use_pvi:
            veh_present = sample.veh_mask[:, last] if sample.n_veh else np.zeros(0, bool)
            v = f.pvi_block(obs[:, last], sample.veh_obs[:, last] if sample.n_veh
                            else np.zeros((0, 2)), veh_dv[:, last] if sample.n_veh
                            else np.zeros((0, 2)), veh_present, ped_dx=dx[:, last])
        l = f.aggregate(e_t, s, v)
        h_dec = tc.tanh(tc.linear(l, self._p("dec.init.w"), self._p("dec.init.b")))
        c_dec = c
        feedback: Node = constant(dx[:, -1])
        steps = []
        for k in range(self.bcfg.decoder_steps):
            x = tc.relu(tc.linear(feedback, self._p("dec.embed.w"), self._p("dec.embed.b")))
            h_dec, c_dec = tc.lstm_cell(x, h_dec, c_dec, self._p("dec.wx"),
                                        self._p("dec.wh"), self._p("dec.b"))
            raw = tc.linear(h_dec, self._p("dec.head.w"), self._p("dec.head.b"))
            p = tc.gaussian_head(raw)
            steps.append(tc.reshape(p, (n_t, 1, 5)))
            if teacher is not None and self.bcfg.teacher_forcing:
                feedback = constant(teacher[:, k])
            else:
                feedback = tc.slice_last(p, 0, 2)  # mean displacement feedback
        return tc.concat(steps, axis=1)

    def _forward_conv(self, sample: SequenceSample) -> Node:
        f = self.features
        tgt, obs, dx, veh_dv = self._prepare(sample)
        dx_seq = np.ascontiguousarray(dx.swapaxes(0, 1))          # [T, n_t, 2]
        e = f.spatial_embed(dx_seq)                                # [T, n_t, e]
        s = v = None
        if self.fcfg.use_social:
            pos_seq = np.ascontiguousarray(sample.ped_obs.swapaxes(0, 1))
            present = np.ascontiguousarray(sample.ped_mask[:, :T_OBS].T)
            s_all = f.social_feature(pos_seq, present)             # [T, n_p, s]
            s = tc.take_rows(s_all, tgt)
        if self.fcfg.use_pvi:
            obs_seq = np.ascontiguousarray(obs.swapaxes(0, 1))     # [T, n_t, 2]
            veh_seq = np.ascontiguousarray(sample.veh_obs.swapaxes(0, 1))
            dv_seq = np.ascontiguousarray(veh_dv.swapaxes(0, 1))
            present_v = np.ascontiguousarray(sample.veh_mask.T)
            v = f.pvi_block_fused(obs_seq, veh_seq, dv_seq, present_v, ped_dx=dx_seq)
        l = f.aggregate(e, s, v)                                   # [T, n_t, agg]
        x = tc.transpose(l, (1, 2, 0))                             # [n_t, agg, T]
        # tanh between conv layers: saturating activations keep every unit
        # trainable, which plain ReLU stacks fail at on tiny batch counts
        for i in range(self.bcfg.tcn_layers):
            x = tc.tanh(tc.temporal_conv(x, self._p(f"tcn.l{i}.k"), self._p(f"tcn.l{i}.b")))
        x = tc.swap_last2(x)                                       # [n_t, T_OBS, C]
        for i in range(self.bcfg.extrap_layers):
            x = tc.temporal_conv(x, self._p(f"extrap.l{i}.k"), self._p(f"extrap.l{i}.b"))
            if i < self.bcfg.extrap_layers - 1:
                x = tc.tanh(x)
        raw = tc.linear(x, self._p("conv.head.w"), self._p("conv.head.b"))
        return tc.gaussian_head(raw)                               # [n_t, T_PRED, 5]

    # -- losses and prediction -------------------------------------------------

    def loss(self, sample: SequenceSample) -> Node:
        """Mean negative log likelihood of true future displacements."""
        truth = self.truth_displacements(sample)
        teacher = truth if self.bcfg.teacher_forcing else None
        params = self.forward(sample, teacher=teacher)
        return tc.bivariate_nll(params, truth)

    def gaussians(self, sample: SequenceSample) -> GaussianParams:
        return GaussianParams.from_array(self.forward(sample).value)

    def predict(self, sample: SequenceSample, n_samples: int = 20, seed: int = 0) -> PredictionSet:
        params = self.gaussians(sample)
        tgt = np.flatnonzero(sample.targets)
        last = sample.ped_obs[tgt][:, -1]
        return sample_trajectories(params, last, n_samples=n_samples, seed=seed)


def sample_trajectories(params: GaussianParams, last_obs: np.ndarray,
                        n_samples: int = 20, seed: int = 0) -> PredictionSet:
    """Draw displacement sequences and integrate them to absolute positions.

    Steps are independent given the parameters; sample k is identical for
    every requested n >= k+1 (nested sampling), so best-of-N is monotone in N.
    """
    last_obs = np.asarray(last_obs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n_p, steps = params.n_ped, params.steps
    out = np.empty((n_samples, n_p, steps, 2))
    rho = params.rho
    root = np.sqrt(np.maximum(0.0, 1.0 - rho * rho))
    for k in range(n_samples):
        z = rng.standard_normal((n_p, steps, 2))
        dx = params.mu[..., 0] + params.sigma[..., 0] * z[..., 0]
        dy = params.mu[..., 1] + params.sigma[..., 1] * (rho * z[..., 0] + root * z[..., 1])
        disp = np.stack([dx, dy], axis=-1)
        out[k] = last_obs[:, None, :] + np.cumsum(disp, axis=1)
    return PredictionSet(out, params, last_obs, seed)
