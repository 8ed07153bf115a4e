"""Recurrent cell kit built around a two-function decomposition of the state
update: an inner function proposes a data-driven state

    z_t = g(x_t, h_{t-1})

and an outer function mixes the proposal with the slowly-moving carried state

    h_t = f(z_t, h_{t-1}).

The delta cell composes configurable inner forms (first-order Elman,
second-order multiplicative, or the general second-order form with learned
alpha/beta vectors), outer forms (weighted sum or gated interpolation), and
gate parametrizations (fixed rate, bias-only, or data-driven sharing the
input projection W x_t).  Classic gated cells (Elman, MI-RNN, SCRN, GRU,
MGU, LSTM with peepholes) are provided as explicit instances of the same
step interface so they can be trained and gradient-checked identically.

Every cell is pure: `step` maps (params, input, state) -> (state', cache)
and `backward_step` consumes the cache to accumulate exact reverse-mode
gradients.  Parameters live in a plain dict of numpy arrays whose keyset is
exactly the trainable set; fixed quantities (fixed gate rates, sum-form
weights, the SCRN context rate) live on the spec.

Gate convention: wherever a gate r interpolates, r weights the carried
state h_{t-1} and (1 - r) weights the proposal z_t.  r = 1 holds the state
constant; r = 0 overwrites it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DataError, NumericError, ShapeError
from .tensor import (DEFAULT_DTYPE, ACTIVATIONS, activation, activation_grad,
                     gaussian_init, require_finite, sigmoid)

LN_EPS = 1e-5

INNER_FORMS = ("first_order", "second_order", "general_second_order")
OUTER_FORMS = ("sum", "interpolate", "late_integration")
GATE_FORMS = ("fixed", "bias_only", "data_driven")

BASELINE_KINDS = ("elman", "mi_rnn", "scrn", "gru", "mgu", "lstm_peephole")
CELL_KINDS = ("delta", "delta_full") + BASELINE_KINDS


# ---------------------------------------------------------------------------
# state and mask containers
# ---------------------------------------------------------------------------

@dataclass
class State:
    """Carried state M_{t-1}: h always, c for the LSTM, s for the SCRN."""

    h: np.ndarray
    c: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None

    def fields(self):
        out = {"h": self.h}
        if self.c is not None:
            out["c"] = self.c
        if self.s is not None:
            out["s"] = self.s
        return out

    def copy(self) -> "State":
        return State(self.h.copy(),
                     None if self.c is None else self.c.copy(),
                     None if self.s is None else self.s.copy())

    def reset_rows(self, keep: np.ndarray) -> "State":
        """Zero the rows where `keep` is False; kept rows are bitwise intact."""
        k = keep[:, None]
        return State(np.where(k, self.h, 0.0),
                     None if self.c is None else np.where(k, self.c, 0.0),
                     None if self.s is None else np.where(k, self.s, 0.0))


@dataclass
class DropMask:
    """Inverted dropout mask: entries are 0 or 1/(1-p), so E[mask] = 1 and
    evaluation needs no rescaling.  p = 0 yields an all-ones mask."""

    values: np.ndarray
    p: float

    @staticmethod
    def sample(p: float, shape, rng: np.random.Generator,
               dtype=DEFAULT_DTYPE) -> "DropMask":
        if not 0.0 <= p < 1.0:
            raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
        keep = (rng.random(shape) >= p).astype(dtype)
        return DropMask(keep / dtype(1.0 - p), p)


# ---------------------------------------------------------------------------
# shared projection helpers
# ---------------------------------------------------------------------------

def project_input(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """W x_t for a batch.  Integer x selects columns of W (one-hot input);
    id -1 is the null start symbol and maps to the zero vector.  Float x is
    treated as a dense (B, V_in) batch."""
    if x.dtype.kind in "iu":
        out = W.T[np.maximum(x, 0)]
        if (x < 0).any():
            out[x < 0] = 0.0
        return out
    return x @ W.T


def project_input_grad(gW: np.ndarray, x: np.ndarray, d: np.ndarray) -> None:
    if x.dtype.kind in "iu":
        valid = x >= 0
        if valid.any():
            np.add.at(gW.T, x[valid], d[valid])
    else:
        gW += d.T @ x


def _lift(v) -> tuple[np.ndarray, bool]:
    """Promote a rank-1 vector to a 1-row batch; report whether it was lifted."""
    a = np.asarray(v, dtype=DEFAULT_DTYPE) if np.asarray(v).dtype.kind == "f" \
        else np.asarray(v)
    if a.ndim == 1:
        return a[None, :], True
    return a, False


# ---------------------------------------------------------------------------
# layer normalization (per-vector, with learned gain and shift)
# ---------------------------------------------------------------------------

def ln_forward(v: np.ndarray, gain: np.ndarray, shift: np.ndarray):
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    return gain * xhat + shift, (xhat, inv, gain)


def ln_backward(dout: np.ndarray, cache, g_gain: np.ndarray,
                g_shift: np.ndarray) -> np.ndarray:
    xhat, inv, gain = cache
    g_gain += (dout * xhat).sum(axis=0)
    g_shift += dout.sum(axis=0)
    dxhat = dout * gain
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# cell specifications
# ---------------------------------------------------------------------------

@dataclass
class CellSpec:
    """Configuration of a delta cell: which inner/outer/gate forms compose
    the update, the activations phi (inner) and Phi (outer), and the
    regularization switches."""

    hidden: int
    n_in: int
    inner: str = "general_second_order"
    outer: str = "late_integration"
    gate: str = "data_driven"
    phi_inner: str = "tanh"
    phi_outer: str = "identity"
    dropout_p: float = 0.0
    layer_norm: bool = False
    fixed_rate: float | np.ndarray = 1.0   # gate value when gate == "fixed"
    gamma: float | np.ndarray = 1.0        # sum-form weight on the proposal
    beta_sum: float | np.ndarray = 1.0     # sum-form weight on the carried state

    def __post_init__(self):
        if self.hidden < 1 or self.n_in < 1:
            raise ShapeError(f"hidden and n_in must be >= 1, got "
                             f"H={self.hidden}, V_in={self.n_in}")
        if self.inner not in INNER_FORMS:
            raise ShapeError(f"unknown inner form {self.inner!r}")
        if self.outer not in OUTER_FORMS:
            raise ShapeError(f"unknown outer form {self.outer!r}")
        if self.gate not in GATE_FORMS:
            raise ShapeError(f"unknown gate form {self.gate!r}")
        for kind in (self.phi_inner, self.phi_outer):
            if kind not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {kind!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.layer_norm and self.inner != "general_second_order":
            raise ShapeError("layer_norm requires the general second-order "
                             "inner form")
        rate = np.asarray(self.fixed_rate, dtype=DEFAULT_DTYPE)
        if self.gate == "fixed" and ((rate < 0).any() or (rate > 1).any()):
            raise ShapeError("fixed gate rate entries must lie in [0, 1]")


# ---------------------------------------------------------------------------
# cell base class
# ---------------------------------------------------------------------------

class Cell:
    """Common interface: parameter manifest, init, stepping, and exact
    per-step reverse-mode gradients."""

    state_fields: tuple[str, ...] = ("h",)
    one_init = frozenset({"alpha", "beta1", "beta2", "ln_gain_rec",
                          "ln_gain_dat"})

    def __init__(self, hidden: int, n_in: int):
        self.hidden = hidden
        self.n_in = n_in

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator, sigma: float = 0.01,
                    dtype=DEFAULT_DTYPE) -> dict[str, np.ndarray]:
        """Gaussian init for matrices, zeros for bias vectors, ones for the
        second-order weighting vectors and layer-norm gains."""
        params = {}
        for name, shape in self.param_shapes().items():
            if len(shape) >= 2:
                params[name] = gaussian_init(shape, sigma, rng, dtype)
            elif name in self.one_init:
                params[name] = np.ones(shape, dtype=dtype)
            else:
                params[name] = np.zeros(shape, dtype=dtype)
        return params

    def zero_grads(self, params) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in params.items()}

    def init_state(self, batch: int, dtype=DEFAULT_DTYPE) -> State:
        H = self.hidden
        return State(
            np.zeros((batch, H), dtype=dtype),
            np.zeros((batch, H), dtype=dtype) if "c" in self.state_fields else None,
            np.zeros((batch, self.context_size), dtype=dtype)
            if "s" in self.state_fields else None,
        )

    def check_params(self, params) -> None:
        want = self.param_shapes()
        missing = set(want) - set(params)
        extra = set(params) - set(want)
        if missing or extra:
            raise ShapeError(f"parameter keyset mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, shape in want.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeError(f"tensor {name} has shape {params[name].shape}, "
                                 f"expected {shape}")

    def check_state(self, state: State) -> None:
        for f in self.state_fields:
            if getattr(state, f) is None:
                raise ShapeError(f"state is missing component {f!r} required "
                                 f"by {type(self).__name__}")
        if state.h.shape[-1] != self.hidden:
            raise ShapeError(f"state h has width {state.h.shape[-1]}, "
                             f"expected {self.hidden}")

    def step(self, params, x, state: State, mask: np.ndarray | None = None):
        raise NotImplementedError

    def backward_step(self, params, cache, d_state: dict, grads) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# the delta cell
# ---------------------------------------------------------------------------

class DeltaCell(Cell):
    """Configurable inner/outer/gate composition.

    Plain form (per step, x projected once as xp = W x_t):

        hp = V h_{t-1}
        z  = phi(a),  a per inner form:
               first_order:          a = hp + xp + b
               second_order:         a = hp * xp + b
               general_second_order: a = alpha*hp*xp + beta1*hp + beta2*xp + b
        r  = fixed | sigmoid(b_r) | sigmoid(xp + b_r)
        h  = Phi(gamma*z + beta_sum*h_{t-1})            (sum)
           | Phi((1 - r)*z + r*h_{t-1})                 (interpolate / late)

    Layer-normalized form (general second-order only): the two linear maps
    are normalized independently, after which the extra bias vectors are
    redundant and dropped:

        rec = LN(V h_{t-1}),  dat = LN(W x_t)
        z   = phi(rec*dat + rec + dat)
        r   = sigmoid(dat + b_r)

    Dropout, when a mask is supplied, applies to the inner proposal z before
    the outer mixing.
    """

    def __init__(self, spec: CellSpec):
        super().__init__(spec.hidden, spec.n_in)
        self.spec = spec

    def param_shapes(self):
        H, V = self.hidden, self.n_in
        s = self.spec
        shapes = {"W": (H, V), "V": (H, H)}
        if s.layer_norm:
            shapes.update(b_r=(H,), ln_gain_rec=(H,), ln_shift_rec=(H,),
                          ln_gain_dat=(H,), ln_shift_dat=(H,))
            return shapes
        shapes["b"] = (H,)
        if s.inner == "general_second_order":
            shapes.update(alpha=(H,), beta1=(H,), beta2=(H,))
        if s.outer != "sum" and s.gate != "fixed":
            shapes["b_r"] = (H,)
        return shapes

    def step(self, params, x, state: State, mask: np.ndarray | None = None):
        s = self.spec
        h_prev = state.h
        xp = project_input(params["W"], x)
        hp_raw = h_prev @ params["V"].T
        cache = {"x": x, "h_prev": h_prev, "mask": mask}

        if s.layer_norm:
            rec, rec_ln = ln_forward(hp_raw, params["ln_gain_rec"],
                                     params["ln_shift_rec"])
            dat, dat_ln = ln_forward(xp, params["ln_gain_dat"],
                                     params["ln_shift_dat"])
            a = rec * dat + rec + dat
            z = activation(s.phi_inner, a)
            r = sigmoid(dat + params["b_r"])
            cache.update(rec=rec, rec_ln=rec_ln, dat=dat, dat_ln=dat_ln)
        else:
            hp = hp_raw
            if s.inner == "first_order":
                a = hp + xp + params["b"]
            elif s.inner == "second_order":
                a = hp * xp + params["b"]
            else:
                a = (params["alpha"] * hp * xp + params["beta1"] * hp
                     + params["beta2"] * xp + params["b"])
            z = activation(s.phi_inner, a)
            if s.outer == "sum":
                r = None
            elif s.gate == "fixed":
                r = np.broadcast_to(
                    np.asarray(s.fixed_rate, dtype=h_prev.dtype), (self.hidden,))
            elif s.gate == "bias_only":
                r = sigmoid(params["b_r"])
            else:
                r = sigmoid(xp + params["b_r"])
            cache.update(xp=xp, hp=hp)

        require_finite(z, "inner proposal z")
        zt = z if mask is None else mask * z
        if s.outer == "sum":
            pre = s.gamma * zt + s.beta_sum * h_prev
        else:
            pre = (1.0 - r) * zt + r * h_prev
        h = activation(s.phi_outer, pre)
        require_finite(h, "state h")
        cache.update(a=a, z=z, zt=zt, r=r, pre=pre, h=h)
        return State(h, state.c, state.s), cache

    def backward_step(self, params, cache, d_state: dict, grads) -> dict:
        s = self.spec
        h_prev, mask = cache["h_prev"], cache["mask"]
        r, zt, z, a = cache["r"], cache["zt"], cache["z"], cache["a"]
        dh = d_state["h"]

        dpre = dh * activation_grad(s.phi_outer, cache["pre"], cache["h"])
        if s.outer == "sum":
            dzt = dpre * s.gamma
            dh_prev = dpre * s.beta_sum
            dr = None
        else:
            dzt = dpre * (1.0 - r)
            dh_prev = dpre * r
            dr = None if s.gate == "fixed" else dpre * (h_prev - zt)
        dz = dzt if mask is None else dzt * mask
        da = dz * activation_grad(s.phi_inner, a, z)

        if s.layer_norm:
            rec, dat = cache["rec"], cache["dat"]
            drec = da * (dat + 1.0)
            ddat = da * (rec + 1.0)
            if dr is not None:
                dgate = dr * r * (1.0 - r)
                grads["b_r"] += dgate.sum(axis=0)
                ddat = ddat + dgate
            dhp = ln_backward(drec, cache["rec_ln"], grads["ln_gain_rec"],
                              grads["ln_shift_rec"])
            dxp = ln_backward(ddat, cache["dat_ln"], grads["ln_gain_dat"],
                              grads["ln_shift_dat"])
        else:
            xp, hp = cache["xp"], cache["hp"]
            if s.inner == "first_order":
                dhp, dxp = da, da.copy()
            elif s.inner == "second_order":
                dhp, dxp = da * xp, da * hp
            else:
                grads["alpha"] += (da * hp * xp).sum(axis=0)
                grads["beta1"] += (da * hp).sum(axis=0)
                grads["beta2"] += (da * xp).sum(axis=0)
                dhp = da * (params["alpha"] * xp + params["beta1"])
                dxp = da * (params["alpha"] * hp + params["beta2"])
            grads["b"] += da.sum(axis=0)
            if dr is not None:
                dgate = dr * r * (1.0 - r)
                grads["b_r"] += dgate.sum(axis=0)
                if s.gate == "data_driven":
                    dxp = dxp + dgate

        grads["V"] += dhp.T @ h_prev
        dh_prev = dh_prev + dhp @ params["V"]
        project_input_grad(grads["W"], cache["x"], dxp)
        return {"h": dh_prev}


# ---------------------------------------------------------------------------
# baseline cells
# ---------------------------------------------------------------------------

class ElmanCell(Cell):
    """h_t = phi(V h_{t-1} + W x_t + b)."""

    def __init__(self, hidden, n_in, phi: str = "tanh"):
        super().__init__(hidden, n_in)
        self.phi = phi

    def param_shapes(self):
        H, V = self.hidden, self.n_in
        return {"W": (H, V), "V": (H, H), "b": (H,)}

    def step(self, params, x, state, mask=None):
        h_prev = state.h
        xp = project_input(params["W"], x)
        a = h_prev @ params["V"].T + xp + params["b"]
        h = activation(self.phi, a)
        require_finite(h, "state h")
        return State(h), {"x": x, "h_prev": h_prev, "a": a, "h": h}

    def backward_step(self, params, cache, d_state, grads):
        da = d_state["h"] * activation_grad(self.phi, cache["a"], cache["h"])
        grads["b"] += da.sum(axis=0)
        grads["V"] += da.T @ cache["h_prev"]
        project_input_grad(grads["W"], cache["x"], da)
        return {"h": da @ params["V"]}


class MiRnnCell(Cell):
    """Multiplicative-integration unit: the general second-order inner form
    used directly as the state, h_t = phi(alpha*Vh*Wx + beta1*Vh + beta2*Wx + b).
    Equivalent to a delta cell with sum outer, gamma = 1, beta_sum = 0."""

    def __init__(self, hidden, n_in, phi: str = "tanh"):
        super().__init__(hidden, n_in)
        self.phi = phi

    def param_shapes(self):
        H, V = self.hidden, self.n_in
        return {"W": (H, V), "V": (H, H), "b": (H,),
                "alpha": (H,), "beta1": (H,), "beta2": (H,)}

    def step(self, params, x, state, mask=None):
        h_prev = state.h
        xp = project_input(params["W"], x)
        hp = h_prev @ params["V"].T
        a = (params["alpha"] * hp * xp + params["beta1"] * hp
             + params["beta2"] * xp + params["b"])
        h = activation(self.phi, a)
        require_finite(h, "state h")
        return State(h), {"x": x, "h_prev": h_prev, "xp": xp, "hp": hp,
                          "a": a, "h": h}

    def backward_step(self, params, cache, d_state, grads):
        xp, hp = cache["xp"], cache["hp"]
        da = d_state["h"] * activation_grad(self.phi, cache["a"], cache["h"])
        grads["alpha"] += (da * hp * xp).sum(axis=0)
        grads["beta1"] += (da * hp).sum(axis=0)
        grads["beta2"] += (da * xp).sum(axis=0)
        grads["b"] += da.sum(axis=0)
        dhp = da * (params["alpha"] * xp + params["beta1"])
        dxp = da * (params["alpha"] * hp + params["beta2"])
        grads["V"] += dhp.T @ cache["h_prev"]
        project_input_grad(grads["W"], cache["x"], dxp)
        return {"h": dhp @ params["V"]}


class ScrnCell(Cell):
    """Structurally constrained network with slow context units:

        s_t = (1 - alpha_s) B x_t + alpha_s s_{t-1}
        h_t = sigmoid(P s_t + A x_t + R_rec h_{t-1})

    alpha_s is a fixed context rate (not trained)."""

    state_fields = ("h", "s")

    def __init__(self, hidden, n_in, context_size: int | None = None,
                 context_rate: float = 0.95):
        super().__init__(hidden, n_in)
        self.context_size = context_size if context_size else max(1, hidden // 5)
        self.context_rate = float(context_rate)

    def param_shapes(self):
        H, V, S = self.hidden, self.n_in, self.context_size
        return {"B": (S, V), "A": (H, V), "P": (H, S), "R_rec": (H, H)}

    def step(self, params, x, state, mask=None):
        self.check_state(state)
        h_prev, s_prev = state.h, state.s
        a_s = self.context_rate
        xs = project_input(params["B"], x)
        s_new = (1.0 - a_s) * xs + a_s * s_prev
        ah = (s_new @ params["P"].T + project_input(params["A"], x)
              + h_prev @ params["R_rec"].T)
        h = sigmoid(ah)
        require_finite(h, "state h")
        return State(h, s=s_new), {"x": x, "h_prev": h_prev, "s": s_new,
                                   "h": h}

    def backward_step(self, params, cache, d_state, grads):
        h = cache["h"]
        da = d_state["h"] * h * (1.0 - h)
        grads["P"] += da.T @ cache["s"]
        grads["R_rec"] += da.T @ cache["h_prev"]
        project_input_grad(grads["A"], cache["x"], da)
        ds = d_state.get("s", 0.0) + da @ params["P"]
        project_input_grad(grads["B"], cache["x"], ds * (1.0 - self.context_rate))
        return {"h": da @ params["R_rec"], "s": ds * self.context_rate}


class GruCell(Cell):
    """Gated recurrent unit with a reset gate q inside the proposal and an
    interpolation gate r on the outside:

        r = sigmoid(V_r h_{t-1} + W_r x_t + b_r)
        q = sigmoid(V_q h_{t-1} + W_q x_t + b_q)
        g = phi(V_h (q * h_{t-1}) + W_h x_t + b_h)
        h_t = (1 - r) * g + r * h_{t-1}
    """

    def __init__(self, hidden, n_in, phi: str = "tanh"):
        super().__init__(hidden, n_in)
        self.phi = phi

    def param_shapes(self):
        H, V = self.hidden, self.n_in
        return {"W_r": (H, V), "V_r": (H, H), "b_r": (H,),
                "W_q": (H, V), "V_q": (H, H), "b_q": (H,),
                "W_h": (H, V), "V_h": (H, H), "b_h": (H,)}

    def step(self, params, x, state, mask=None):
        h_prev = state.h
        r = sigmoid(h_prev @ params["V_r"].T + project_input(params["W_r"], x)
                    + params["b_r"])
        q = sigmoid(h_prev @ params["V_q"].T + project_input(params["W_q"], x)
                    + params["b_q"])
        qh = q * h_prev
        ag = qh @ params["V_h"].T + project_input(params["W_h"], x) + params["b_h"]
        g = activation(self.phi, ag)
        h = (1.0 - r) * g + r * h_prev
        require_finite(h, "state h")
        return State(h), {"x": x, "h_prev": h_prev, "r": r, "q": q, "qh": qh,
                          "ag": ag, "g": g}

    def backward_step(self, params, cache, d_state, grads):
        h_prev, r, q, g = cache["h_prev"], cache["r"], cache["q"], cache["g"]
        dh = d_state["h"]
        dg = dh * (1.0 - r)
        dh_prev = dh * r
        dr = dh * (h_prev - g)
        da_g = dg * activation_grad(self.phi, cache["ag"], g)
        grads["V_h"] += da_g.T @ cache["qh"]
        grads["b_h"] += da_g.sum(axis=0)
        project_input_grad(grads["W_h"], cache["x"], da_g)
        dqh = da_g @ params["V_h"]
        dq = dqh * h_prev
        dh_prev = dh_prev + dqh * q
        for gate, dgate, Wn, Vn, bn in (
                (q, dq, "W_q", "V_q", "b_q"), (r, dr, "W_r", "V_r", "b_r")):
            da = dgate * gate * (1.0 - gate)
            grads[Vn] += da.T @ h_prev
            grads[bn] += da.sum(axis=0)
            project_input_grad(grads[Wn], cache["x"], da)
            dh_prev = dh_prev + da @ params[Vn]
        return {"h": dh_prev}


class MguCell(Cell):
    """Minimal gated unit: one forget gate f serves both as the reset inside
    the proposal and as the interpolation gate:

        f = sigmoid(V_f h_{t-1} + W_f x_t + b_f)
        g = phi(V_h (f * h_{t-1}) + W_h x_t + b_h)
        h_t = (1 - f) * g + f * h_{t-1}
    """

    def __init__(self, hidden, n_in, phi: str = "tanh"):
        super().__init__(hidden, n_in)
        self.phi = phi

    def param_shapes(self):
        H, V = self.hidden, self.n_in
        return {"W_f": (H, V), "V_f": (H, H), "b_f": (H,),
                "W_h": (H, V), "V_h": (H, H), "b_h": (H,)}

    def step(self, params, x, state, mask=None):
        h_prev = state.h
        f = sigmoid(h_prev @ params["V_f"].T + project_input(params["W_f"], x)
                    + params["b_f"])
        fh = f * h_prev
        ag = fh @ params["V_h"].T + project_input(params["W_h"], x) + params["b_h"]
        g = activation(self.phi, ag)
        h = (1.0 - f) * g + f * h_prev
        require_finite(h, "state h")
        return State(h), {"x": x, "h_prev": h_prev, "f": f, "fh": fh,
                          "ag": ag, "g": g}

    def backward_step(self, params, cache, d_state, grads):
        h_prev, f, g = cache["h_prev"], cache["f"], cache["g"]
        dh = d_state["h"]
        dg = dh * (1.0 - f)
        dh_prev = dh * f
        df = dh * (h_prev - g)
        da_g = dg * activation_grad(self.phi, cache["ag"], g)
        grads["V_h"] += da_g.T @ cache["fh"]
        grads["b_h"] += da_g.sum(axis=0)
        project_input_grad(grads["W_h"], cache["x"], da_g)
        dfh = da_g @ params["V_h"]
        df = df + dfh * h_prev
        dh_prev = dh_prev + dfh * f
        da_f = df * f * (1.0 - f)
        grads["V_f"] += da_f.T @ h_prev
        grads["b_f"] += da_f.sum(axis=0)
        project_input_grad(grads["W_f"], cache["x"], da_f)
        return {"h": dh_prev + da_f @ params["V_f"]}


class LstmCell(Cell):
    """LSTM with peephole connections; the output gate reads the current
    cell state:

        z = tanh(W_z x_t + V_z h_{t-1} + b_z)
        i = sigmoid(W_i x_t + V_i h_{t-1} + U_i c_{t-1} + b_i)
        f = sigmoid(W_f x_t + V_f h_{t-1} + U_f c_{t-1} + b_f)
        c_t = f * c_{t-1} + i * z
        r = sigmoid(W_r x_t + V_r h_{t-1} + U_r c_t + b_r)
        h_t = r * tanh(c_t)
    """

    state_fields = ("h", "c")

    def param_shapes(self):
        H, V = self.hidden, self.n_in
        shapes = {"W_z": (H, V), "V_z": (H, H), "b_z": (H,)}
        for gate in ("i", "f", "r"):
            shapes.update({f"W_{gate}": (H, V), f"V_{gate}": (H, H),
                           f"U_{gate}": (H, H), f"b_{gate}": (H,)})
        return shapes

    def step(self, params, x, state, mask=None):
        self.check_state(state)
        h_prev, c_prev = state.h, state.c
        az = (project_input(params["W_z"], x) + h_prev @ params["V_z"].T
              + params["b_z"])
        z = np.tanh(az)
        i = sigmoid(project_input(params["W_i"], x) + h_prev @ params["V_i"].T
                    + c_prev @ params["U_i"].T + params["b_i"])
        f = sigmoid(project_input(params["W_f"], x) + h_prev @ params["V_f"].T
                    + c_prev @ params["U_f"].T + params["b_f"])
        c = f * c_prev + i * z
        r = sigmoid(project_input(params["W_r"], x) + h_prev @ params["V_r"].T
                    + c @ params["U_r"].T + params["b_r"])
        tc = np.tanh(c)
        h = r * tc
        require_finite(h, "state h")
        require_finite(c, "cell state c")
        return State(h, c=c), {"x": x, "h_prev": h_prev, "c_prev": c_prev,
                               "z": z, "i": i, "f": f, "c": c, "r": r,
                               "tc": tc}

    def backward_step(self, params, cache, d_state, grads):
        h_prev, c_prev = cache["h_prev"], cache["c_prev"]
        z, i, f, c, r, tc = (cache["z"], cache["i"], cache["f"], cache["c"],
                             cache["r"], cache["tc"])
        dh = d_state["h"]
        dr = dh * tc
        dc = d_state.get("c", 0.0) + dh * r * (1.0 - tc * tc)
        dh_prev = np.zeros_like(dh)

        da_r = dr * r * (1.0 - r)
        grads["V_r"] += da_r.T @ h_prev
        grads["U_r"] += da_r.T @ c
        grads["b_r"] += da_r.sum(axis=0)
        project_input_grad(grads["W_r"], cache["x"], da_r)
        dh_prev += da_r @ params["V_r"]
        dc = dc + da_r @ params["U_r"]

        df = dc * c_prev
        di = dc * z
        dz = dc * i
        dc_prev = dc * f
        for gate, dgate, name in ((i, di, "i"), (f, df, "f")):
            da = dgate * gate * (1.0 - gate)
            grads[f"V_{name}"] += da.T @ h_prev
            grads[f"U_{name}"] += da.T @ c_prev
            grads[f"b_{name}"] += da.sum(axis=0)
            project_input_grad(grads[f"W_{name}"], cache["x"], da)
            dh_prev += da @ params[f"V_{name}"]
            dc_prev = dc_prev + da @ params[f"U_{name}"]
        da_z = dz * (1.0 - z * z)
        grads["V_z"] += da_z.T @ h_prev
        grads["b_z"] += da_z.sum(axis=0)
        project_input_grad(grads["W_z"], cache["x"], da_z)
        dh_prev += da_z @ params["V_z"]
        return {"h": dh_prev, "c": dc_prev}


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------

def gate_rates(spec: CellSpec, params, x_preact) -> np.ndarray:
    """Interpolation rates r for the configured gate form.  For the
    data-driven form `x_preact` must be the shared projection W x_t."""
    H = spec.hidden
    if spec.gate == "fixed":
        return np.broadcast_to(np.asarray(spec.fixed_rate, dtype=DEFAULT_DTYPE),
                               (H,)).copy()
    b_r = params["b_r"]
    if b_r.shape != (H,):
        raise ShapeError(f"b_r has shape {b_r.shape}, expected ({H},)")
    if spec.gate == "bias_only":
        return sigmoid(b_r)
    xp, lifted = _lift(x_preact)
    if xp.shape[-1] != H:
        raise ShapeError(f"x_preact has width {xp.shape[-1]}, expected {H}")
    r = sigmoid(xp + b_r)
    return r[0] if lifted else r


def inner_first_order(params, x_t, h_prev, phi: str = "tanh") -> np.ndarray:
    """z = phi(V h_prev + W x_t + b)."""
    x, xl = _lift(x_t)
    h, hl = _lift(h_prev)
    _check_inner_shapes(params, x, h)
    a = h @ params["V"].T + project_input(params["W"], x) + params["b"]
    require_finite(a, "inner pre-activation")
    z = activation(phi, a)
    return z[0] if (xl and hl) else z


def inner_second_order(params, x_t, h_prev, general: bool = False,
                       phi: str = "tanh") -> np.ndarray:
    """Multiplicative inner form; with `general`, the alpha/beta1/beta2
    weighted combination of product and linear terms (V and W shared)."""
    x, xl = _lift(x_t)
    h, hl = _lift(h_prev)
    _check_inner_shapes(params, x, h)
    hp = h @ params["V"].T
    xp = project_input(params["W"], x)
    if general:
        a = (params["alpha"] * hp * xp + params["beta1"] * hp
             + params["beta2"] * xp + params["b"])
    else:
        a = hp * xp + params["b"]
    require_finite(a, "inner pre-activation")
    z = activation(phi, a)
    return z[0] if (xl and hl) else z


def _check_inner_shapes(params, x, h):
    H, V = params["W"].shape
    if params["V"].shape != (H, H):
        raise ShapeError(f"V has shape {params['V'].shape}, expected ({H}, {H})")
    if h.shape[-1] != H:
        raise ShapeError(f"h_prev has width {h.shape[-1]}, expected {H}")
    if x.dtype.kind == "f" and x.shape[-1] != V:
        raise ShapeError(f"x_t has width {x.shape[-1]}, expected {V}")


def outer_combine(spec: CellSpec, z, h_prev, r=None) -> np.ndarray:
    """Mix proposal and carried state: weighted sum or gated interpolation
    (r weights the carried state)."""
    zt, zl = _lift(z)
    h, hl = _lift(h_prev)
    if zt.shape != h.shape:
        raise ShapeError(f"z shape {zt.shape} != h_prev shape {h.shape}")
    if spec.outer == "sum":
        pre = spec.gamma * zt + spec.beta_sum * h
    else:
        r = np.asarray(r, dtype=zt.dtype)
        if r.shape[-1] != h.shape[-1]:
            raise ShapeError(f"gate r has width {r.shape[-1]}, "
                             f"expected {h.shape[-1]}")
        pre = (1.0 - r) * zt + r * h
    out = activation(spec.phi_outer, pre)
    return out[0] if (zl and hl) else out


def delta_step(spec: CellSpec, params, x_t, state: State,
               mask: DropMask | np.ndarray | None = None) -> State:
    """One full delta-cell update; `mask` (if given) drops inner units."""
    cell = DeltaCell(spec)
    cell.check_params(params)
    m = mask.values if isinstance(mask, DropMask) else mask
    x = np.asarray(x_t)
    if x.dtype.kind == "f" and x.ndim == 1:
        x = x[None, :]
    h, hl = _lift(state.h)
    new, _ = cell.step(params, x, State(h), None if m is None else np.atleast_2d(m))
    return State(new.h[0] if hl else new.h, state.c, state.s)


def baseline_step(cell: Cell, params, x_t, state: State) -> State:
    """One step of a baseline cell; validates the state components."""
    cell.check_params(params)
    cell.check_state(state)
    x = np.asarray(x_t)
    if x.dtype.kind == "f" and x.ndim == 1:
        x = x[None, :]
    lifted = state.h.ndim == 1
    st = State(np.atleast_2d(state.h),
               None if state.c is None else np.atleast_2d(state.c),
               None if state.s is None else np.atleast_2d(state.s))
    new, _ = cell.step(params, x, st)
    if lifted:
        return State(new.h[0],
                     None if new.c is None else new.c[0],
                     None if new.s is None else new.s[0])
    return new


def make_cell(kind: str, hidden: int, n_in: int, **kw) -> Cell:
    """Factory over every supported cell kind.  `delta` accepts CellSpec
    keyword fields; `delta_full` is the canonical configuration (general
    second-order inner, late integration, data-driven gate)."""
    if kind in ("delta", "delta_full"):
        defaults = dict(inner="general_second_order", outer="late_integration",
                        gate="data_driven")
        defaults.update(kw)
        return DeltaCell(CellSpec(hidden, n_in, **defaults))
    if kind == "elman":
        return ElmanCell(hidden, n_in, **kw)
    if kind == "mi_rnn":
        return MiRnnCell(hidden, n_in, **kw)
    if kind == "scrn":
        return ScrnCell(hidden, n_in, **kw)
    if kind == "gru":
        return GruCell(hidden, n_in, **kw)
    if kind == "mgu":
        return MguCell(hidden, n_in, **kw)
    if kind == "lstm_peephole":
        return LstmCell(hidden, n_in, **kw)
    raise DataError(f"unknown cell kind {kind!r}; valid kinds: "
                    f"{', '.join(CELL_KINDS)}")
