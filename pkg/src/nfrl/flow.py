"""Conditional normalizing flow: affine coupling blocks + PLU linear flows.

The flow f maps data x to latent z through T (coupling, linear) block pairs.
Densities come from the change of variables
    log p(x | y) = log N(f(x); 0, I) + sum of per-block log-dets,
sampling inverts the chain on prior draws, and both directions are recorded
on a Tape so gradients flow through log_prob and through sample (the
reparameterized path used by variational and actor objectives).

Coupling blocks transform one half of the dimensions given the other half
plus an encoded conditioner:
    x2_tilde = (x2 + a(x1, y)) * exp(-s(x1, y)),   log-det = -sum(s)
with s clamped to +-scale_clamp before exponentiation (the same clamped s is
used by the inverse, so round trips are exact). Linear flows apply
x -> x @ (P L U) with P a frozen seeded permutation, L unit lower triangular,
U upper triangular; log|det| = sum log|diag(U)|.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Array, MlpSpec, Node, ParamStore, Tape
from .errors import ConfigError, ContractError, NumericError, SingularError

LOG_2PI = np.log(2.0 * np.pi)
SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class FlowConfig:
    event_dim: int
    raw_cond_dim: int = 0
    blocks: int = 6
    channels: int = 512
    encoder_layers: int = 4
    rep_dim: int = 512
    activation: str = "gelu"
    layernorm: bool = True
    scale_clamp: float = 7.0
    permutation: str = "random"  # or "identity"
    seed: int = 0

    def __post_init__(self):
        if self.event_dim < 2:
            raise ConfigError("coupling flows need event_dim >= 2")
        if self.raw_cond_dim < 0 or self.blocks < 1:
            raise ConfigError("raw_cond_dim must be >= 0 and blocks >= 1")
        if self.permutation not in ("random", "identity"):
            raise ConfigError(f"unknown permutation mode {self.permutation!r}")


@dataclass
class ConditionContext:
    """Conditioning input: raw vector batch plus a per-row mask bit.

    A masked row's raw input is zeroed and its flag set to 1, so one model
    carries both the conditional density and the marginal (mask on).
    """

    raw: object  # (B, raw_dim) array or Node
    mask: Array  # (B,) bool

    @classmethod
    def of(cls, raw) -> "ConditionContext":
        raw = raw if isinstance(raw, Node) else np.atleast_2d(np.asarray(raw, dtype=np.float64))
        n = raw.value.shape[0] if isinstance(raw, Node) else raw.shape[0]
        return cls(raw=raw, mask=np.zeros(n, dtype=bool))

    @classmethod
    def unconditional(cls, batch: int) -> "ConditionContext":
        return cls(raw=np.zeros((batch, 0)), mask=np.zeros(batch, dtype=bool))

    @property
    def batch(self) -> int:
        return self.raw.value.shape[0] if isinstance(self.raw, Node) else self.raw.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.raw.value.shape[1] if isinstance(self.raw, Node) else self.raw.shape[1]

    def with_mask(self, mask: Array) -> "ConditionContext":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.batch,):
            raise ContractError("mask shape must be (batch,)")
        return ConditionContext(raw=self.raw, mask=mask)

    def rows(self, sub: slice) -> "ConditionContext":
        """Row-slice view for chunked evaluation (plain-array raw only)."""
        if isinstance(self.raw, Node):
            raise ContractError("cannot chunk a taped conditioning input")
        return ConditionContext(raw=self.raw[sub], mask=self.mask[sub])


@dataclass(frozen=True)
class CouplingBlock:
    """One affine coupling transform; `parity` picks which half passes through."""

    a_spec: MlpSpec
    s_spec: MlpSpec
    a_prefix: str
    s_prefix: str
    parity: str  # low_first: low half conditions, high half is transformed
    d: int
    scale_clamp: float

    def _split(self, x: Node):
        p = self.d // 2
        if self.parity == "low_first":
            return ad.cols(x, 0, p), ad.cols(x, p, self.d)
        return ad.cols(x, self.d - p, self.d), ad.cols(x, 0, self.d - p)

    def _join(self, x_pass: Node, x_tr: Node) -> Node:
        if self.parity == "low_first":
            return ad.concat_cols([x_pass, x_tr])
        return ad.concat_cols([x_tr, x_pass])

    def _nets(self, store: ParamStore, x_pass: Node, y_enc: Node, tape: Tape):
        h = ad.concat_cols([x_pass, y_enc])
        a = ad.mlp_forward(self.a_spec, store, self.a_prefix, h, tape)
        s = ad.clamp(ad.mlp_forward(self.s_spec, store, self.s_prefix, h, tape),
                     -self.scale_clamp, self.scale_clamp)
        return a, s

    def forward(self, store: ParamStore, x: Node, y_enc: Node, tape: Tape):
        x_pass, x_tr = self._split(x)
        a, s = self._nets(store, x_pass, y_enc, tape)
        out = ad.mul(ad.add(x_tr, a), ad.exp(ad.neg(s)))
        log_det = ad.neg(ad.vsum(s, axis=1))
        return self._join(x_pass, out), log_det

    def inverse(self, store: ParamStore, x: Node, y_enc: Node, tape: Tape):
        """Returns (x_data, forward-direction log-det evaluated at x_data)."""
        x_pass, x_tr = self._split(x)
        a, s = self._nets(store, x_pass, y_enc, tape)
        out = ad.sub(ad.mul(x_tr, ad.exp(s)), a)
        log_det = ad.neg(ad.vsum(s, axis=1))
        return self._join(x_pass, out), log_det


@dataclass(frozen=True)
class LinearFlow:
    """x -> x @ (P L U) with frozen permutation P and packed triangular params."""

    d: int
    src: Array  # (x @ P)[:, j] = x[:, src[j]]
    inv_src: Array
    l_name: str
    u_name: str
    diag_idx: Array  # positions of U's diagonal inside the packed vector

    def _check_diag(self, store: ParamStore, where: str):
        diag = store.view(self.u_name)[self.diag_idx]
        small = np.abs(diag) < SINGULAR_TOL
        if np.any(small):
            i = int(np.flatnonzero(small)[0])
            raise SingularError(where, i, float(diag[i]))

    def _mats(self, store: ParamStore, tape: Tape):
        l_mat = ad.lower_unit(tape.param(store, self.l_name), self.d)
        u_vec = tape.param(store, self.u_name)
        return l_mat, ad.upper_tri(u_vec, self.d), u_vec

    def _log_det(self, u_vec: Node) -> Node:
        return ad.vsum(ad.abs_log(ad.gather(u_vec, self.diag_idx)))

    def forward(self, store: ParamStore, x: Node, tape: Tape):
        self._check_diag(store, self.u_name)
        l_mat, u_mat, u_vec = self._mats(store, tape)
        y = ad.matmul(ad.matmul(ad.permute_cols(x, self.src), l_mat), u_mat)
        return y, self._log_det(u_vec)

    def inverse(self, store: ParamStore, y: Node, tape: Tape):
        """Returns (x, forward-direction log-det); two triangular solves + gather."""
        self._check_diag(store, self.u_name)
        l_mat, u_mat, u_vec = self._mats(store, tape)
        t1 = ad.solve_right_tri(y, u_mat, lower=False)
        t2 = ad.solve_right_tri(t1, l_mat, lower=True, unit_diagonal=True)
        return ad.permute_cols(t2, self.inv_src), self._log_det(u_vec)


def _identity_u_packed(d: int) -> Array:
    vec = np.zeros(d * (d + 1) // 2)
    rows, cols_ = np.triu_indices(d)
    vec[rows == cols_] = 1.0
    return vec


class FlowModel:
    """T coupling+linear block pairs over a standard-normal prior, with a
    conditioner encoder shared by every block."""

    def __init__(self, cfg: FlowConfig):
        self.cfg = cfg
        d = cfg.event_dim
        rng = np.random.default_rng(cfg.seed)
        hidden = (cfg.rep_dim,) * cfg.encoder_layers
        self.encoder_spec = MlpSpec(cfg.raw_cond_dim + 1, hidden, cfg.rep_dim,
                                    layernorm=cfg.layernorm, activation=cfg.activation)
        params = ad.init_mlp_params(self.encoder_spec, rng, "enc")
        net_in = d // 2 + cfg.rep_dim
        net_out = d - d // 2
        coupling_spec = MlpSpec(net_in, (cfg.channels, cfg.channels), net_out,
                                layernorm=cfg.layernorm, activation=cfg.activation)
        self.blocks: list[tuple[CouplingBlock, LinearFlow]] = []
        rows, cols_ = np.triu_indices(d)
        diag_idx = np.flatnonzero(rows == cols_)
        for i in range(cfg.blocks):
            parity = "low_first" if i % 2 == 0 else "high_first"
            cpl = CouplingBlock(coupling_spec, coupling_spec, f"cpl{i}.a", f"cpl{i}.s",
                                parity, d, cfg.scale_clamp)
            params.update(ad.init_mlp_params(coupling_spec, rng, f"cpl{i}.a", zero_final=True))
            params.update(ad.init_mlp_params(coupling_spec, rng, f"cpl{i}.s", zero_final=True))
            src = rng.permutation(d) if cfg.permutation == "random" else np.arange(d)
            lin = LinearFlow(d, src, np.argsort(src), f"lin{i}.l", f"lin{i}.u", diag_idx)
            params[f"lin{i}.l"] = np.zeros(d * (d - 1) // 2)
            params[f"lin{i}.u"] = _identity_u_packed(d)
            self.blocks.append((cpl, lin))
        self.store = ParamStore(params, rng_seed=cfg.seed)

    @property
    def d(self) -> int:
        return self.cfg.event_dim

    # -- conditioning ------------------------------------------------------

    def encode(self, ctx: ConditionContext, tape: Tape) -> Node:
        """Encoder input is (masked raw, mask flag); masked rows see zeros + 1."""
        if ctx.raw_dim != self.cfg.raw_cond_dim:
            raise ContractError(
                f"conditioner width {ctx.raw_dim}, model expects {self.cfg.raw_cond_dim}")
        flag = ctx.mask.astype(np.float64)[:, None]
        parts = []
        if self.cfg.raw_cond_dim > 0:
            raw = ctx.raw if isinstance(ctx.raw, Node) else tape.const(ctx.raw)
            parts.append(ad.mul(raw, tape.const(1.0 - flag)))
        parts.append(tape.const(flag))
        return ad.mlp_forward(self.encoder_spec, self.store, "enc",
                              ad.concat_cols(parts) if len(parts) > 1 else parts[0], tape)

    # -- densities ---------------------------------------------------------

    def _forward_latent(self, x: Node, y_enc: Node, tape: Tape):
        log_det = None
        h = x
        for i, (cpl, lin) in enumerate(self.blocks):
            try:
                h, ld1 = cpl.forward(self.store, h, y_enc, tape)
                h, ld2 = lin.forward(self.store, h, tape)
            except NumericError as e:
                raise NumericError(f"flow block {i}", e.where) from e
            if not np.all(np.isfinite(h.value)):
                raise NumericError(f"flow block {i}")
            ld = ad.add(ld1, ld2)
            log_det = ld if log_det is None else ad.add(log_det, ld)
        return h, log_det

    def _prior_logpdf(self, z: Node) -> Node:
        return ad.sub(ad.mul(ad.vsum(ad.square(z), axis=1), -0.5),
                      0.5 * self.d * LOG_2PI)

    def log_prob(self, x, ctx: ConditionContext, tape: Tape) -> Node:
        """(B,) log-density node, differentiable in params and in x."""
        if not isinstance(x, Node):
            x = tape.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if x.value.ndim != 2 or x.value.shape[1] != self.d:
            raise ContractError(f"x must be (B, {self.d})")
        y_enc = self.encode(ctx, tape)
        z, log_det = self._forward_latent(x, y_enc, tape)
        return ad.add(self._prior_logpdf(z), log_det)

    def _inverse_latent(self, z: Node, y_enc: Node, tape: Tape):
        h = z
        log_det = None
        for i in reversed(range(len(self.blocks))):
            cpl, lin = self.blocks[i]
            try:
                h, ld2 = lin.inverse(self.store, h, tape)
                h, ld1 = cpl.inverse(self.store, h, y_enc, tape)
            except NumericError as e:
                raise NumericError(f"flow block {i} (inverse)", e.where) from e
            if not np.all(np.isfinite(h.value)):
                raise NumericError(f"flow block {i} (inverse)")
            ld = ad.add(ld1, ld2)
            log_det = ld if log_det is None else ad.add(log_det, ld)
        return h, log_det

    def sample(self, ctx: ConditionContext, rng: np.random.Generator, tape: Tape):
        """Draw x = f^{-1}(z), z ~ N(0, I). Returns (x node, log p(x) node);
        gradients flow through the inverse path (reparameterized sampling)."""
        z = tape.const(rng.standard_normal((ctx.batch, self.d)))
        y_enc = self.encode(ctx, tape)
        x, log_det = self._inverse_latent(z, y_enc, tape)
        return x, ad.add(self._prior_logpdf(z), log_det)

    def forward_latent_values(self, x: Array, ctx: ConditionContext | None = None):
        """Plain-array data -> latent map; returns (z, total forward log-det)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        ctx = ctx or ConditionContext.unconditional(x.shape[0])
        tape = Tape(self.store)
        z, ld = self._forward_latent(tape.const(x), self.encode(ctx, tape), tape)
        return z.value, ld.value + np.zeros(x.shape[0])

    def inverse_latent_values(self, z: Array, ctx: ConditionContext | None = None):
        """Plain-array latent -> data map (inverse of forward_latent_values)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        ctx = ctx or ConditionContext.unconditional(z.shape[0])
        tape = Tape(self.store)
        x, _ = self._inverse_latent(tape.const(z), self.encode(ctx, tape), tape)
        return x.value

    def score_wrt_input(self, x: Array, ctx: ConditionContext,
                        chunk: int = 8192) -> Array:
        """grad_x log p(x | ctx) as a plain array."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty_like(x)
        for i in range(0, x.shape[0], chunk):
            sub = slice(i, min(i + chunk, x.shape[0]))
            tape = Tape(self.store)
            x_node = tape.input(x[sub])
            lp = self.log_prob(x_node, ctx.rows(sub), tape)
            tape.backward(lp)  # rows are independent, so the ones-seed is per-row
            out[sub] = x_node.grad
        return out

    def log_prob_values(self, x: Array, ctx: ConditionContext | None = None,
                        chunk: int = 8192) -> Array:
        """Convenience log-density evaluation without keeping tapes around."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if ctx is None:
            ctx = ConditionContext.unconditional(x.shape[0])
        out = np.empty(x.shape[0])
        for i in range(0, x.shape[0], chunk):
            sub = slice(i, min(i + chunk, x.shape[0]))
            out[sub] = self.log_prob(x[sub], ctx.rows(sub), Tape(self.store)).value
        return out

    def sample_values(self, ctx: ConditionContext, rng: np.random.Generator,
                      chunk: int = 8192):
        x = np.empty((ctx.batch, self.d))
        lp = np.empty(ctx.batch)
        for i in range(0, ctx.batch, chunk):
            sub = slice(i, min(i + chunk, ctx.batch))
            xs, ls = self.sample(ctx.rows(sub), rng, Tape(self.store))
            x[sub], lp[sub] = xs.value, ls.value
        return x, lp

    # -- serialization -----------------------------------------------------

    def arch_header(self) -> dict[str, str]:
        cfg = self.cfg
        head = {
            "kind": "flow",
            "event_dim": cfg.event_dim,
            "raw_cond_dim": cfg.raw_cond_dim,
            "blocks": cfg.blocks,
            "channels": cfg.channels,
            "encoder_layers": cfg.encoder_layers,
            "rep_dim": cfg.rep_dim,
            "activation": cfg.activation,
            "layernorm": int(cfg.layernorm),
            "scale_clamp": repr(cfg.scale_clamp),
            "permutation": cfg.permutation,
            "seed": cfg.seed,
            "parity": ",".join("l" if i % 2 == 0 else "h" for i in range(cfg.blocks)),
        }
        for i, (_, lin) in enumerate(self.blocks):
            head[f"perm{i}"] = ",".join(str(int(j)) for j in lin.src)
        return {k: str(v) for k, v in head.items()}

    @classmethod
    def config_from_header(cls, header: dict[str, str]) -> FlowConfig:
        try:
            return FlowConfig(
                event_dim=int(header["event_dim"]),
                raw_cond_dim=int(header["raw_cond_dim"]),
                blocks=int(header["blocks"]),
                channels=int(header["channels"]),
                encoder_layers=int(header["encoder_layers"]),
                rep_dim=int(header["rep_dim"]),
                activation=header["activation"],
                layernorm=bool(int(header["layernorm"])),
                scale_clamp=float(header["scale_clamp"]),
                permutation=header["permutation"],
                seed=int(header["seed"]),
            )
        except KeyError as e:
            raise ContractError(f"checkpoint header missing field {e}") from e

    def save(self, path: str, extra: dict[str, str] | None = None):
        header = self.arch_header()
        header.update(extra or {})
        ad.save_checkpoint(path, self.store, header)

    @classmethod
    def load(cls, path: str) -> tuple["FlowModel", dict[str, str]]:
        header, values, slices = ad.load_checkpoint(path)
        model = cls(cls.config_from_header(header))
        for i, (_, lin) in enumerate(model.blocks):
            want = header.get(f"perm{i}")
            have = ",".join(str(int(j)) for j in lin.src)
            if want is not None and want != have:
                raise ContractError(f"checkpoint permutation mismatch in block {i}")
        ad.restore_store(model.store, values, slices)
        return model, header
