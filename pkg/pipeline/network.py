# network.py - CNN-BiGRU sound event detector, forward and backward in numpy
# conv(3x3, same) -> ReLU -> max-pool along frequency, repeated; the channel
# maps are stacked per frame and fed to a (bi)GRU, then a sigmoid output layer.
# Gradients are exact reverse mode, BPTT through both GRU directions.
import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from pipeline.errors import CacheMismatch, FormatError, MissingInput, ShapeError

CHECKPOINT_MAGIC = b"CSM1"
GATES = ("g", "r", "h")
DIRECTIONS = ("f", "b")


@dataclass
class Posteriorgram:
    values: np.ndarray  # M x T, strictly inside (0, 1)
    hop_ms: float


@dataclass
class HiddenState:
    h_f: np.ndarray
    h_b: np.ndarray = None
    gates_f: dict = None
    gates_b: dict = None

    @property
    def stacked(self):
        if self.h_b is None:
            return self.h_f
        return np.concatenate([self.h_f, self.h_b], axis=0)


# ---------------------------------------------------------------------------
# Shapes and initialization
# ---------------------------------------------------------------------------

def pooled_dim(n_features, cfg):
    """Frequency bins left after every pooling stage (floor division)."""
    d = n_features
    for _ in range(cfg.conv_layers):
        d = d // cfg.pool[0]
    return d


def recurrent_input_dim(n_features, cfg):
    if cfg.conv_layers == 0:
        return n_features
    return pooled_dim(n_features, cfg) * cfg.conv_channels[-1]


def output_input_dim(n_features, cfg):
    if cfg.recurrent_mode == "none":
        return recurrent_input_dim(n_features, cfg)
    if cfg.recurrent_mode == "forward_only":
        return cfg.gru_units
    return 2 * cfg.gru_units


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg, n_features, seed=0):
    """Glorot-uniform weights, zero biases. Both GRU directions are always
    allocated when a recurrent layer exists; forward_only leaves the
    backward set unused."""
    cfg.validate()
    if cfg.n_events < 1:
        raise ShapeError("n_events must be set before initializing parameters")
    if cfg.conv_layers and pooled_dim(n_features, cfg) < 1:
        raise ShapeError(f"{n_features} feature bins collapse to zero after pooling")
    rng = np.random.default_rng(seed)
    params = {}
    kh, kw = cfg.kernel
    c_in = 1
    for layer, c_out in enumerate(cfg.conv_channels):
        params[f"conv{layer}_W"] = _glorot(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw)
        params[f"conv{layer}_b"] = np.zeros(c_out)
        c_in = c_out

    if cfg.recurrent_mode != "none":
        F = recurrent_input_dim(n_features, cfg)
        H = cfg.gru_units
        for d in DIRECTIONS:
            for gate in GATES:
                params[f"gru_{d}_W{gate}"] = _glorot(rng, (H, F), F, H)
                params[f"gru_{d}_U{gate}"] = _glorot(rng, (H, H), H, H)
                params[f"gru_{d}_b{gate}"] = np.zeros(H)

    K = output_input_dim(n_features, cfg)
    params["out_W"] = _glorot(rng, (cfg.n_events, K), K, cfg.n_events)
    params["out_b"] = np.zeros(cfg.n_events)
    return params


def n_params(params):
    return int(sum(p.size for p in params.values()))


def params_fingerprint(params):
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        a = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Convolution stack
# ---------------------------------------------------------------------------

def _conv2d_same(x, W, b):
    """Cross-correlation with zero 'same' padding. x: C_in x D x T."""
    c_in, D, T = x.shape
    c_out, w_in, kh, kw = W.shape
    if w_in != c_in:
        raise ShapeError(f"conv kernel expects {w_in} input channels, got {c_in}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.empty((c_out, D * T), dtype=x.dtype)
    out[:] = b[:, None]
    for i in range(kh):
        for j in range(kw):
            out += W[:, :, i, j] @ xp[:, i:i + D, j:j + T].reshape(c_in, -1)
    return out.reshape(c_out, D, T), xp


def _conv2d_same_backward(dout, xp, W, need_dx=True):
    c_out, D, T = dout.shape
    _, c_in, kh, kw = W.shape
    G = dout.reshape(c_out, -1)
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + D, j:j + T].reshape(c_in, -1)
            dW[:, :, i, j] = G @ patch.T
            if need_dx:
                dxp[:, i:i + D, j:j + T] += (W[:, :, i, j].T @ G).reshape(c_in, D, T)
    db = G.sum(axis=1)
    dx = None
    if need_dx:
        ph, pw = kh // 2, kw // 2
        dx = dxp[:, ph:ph + D, pw:pw + T]
    return dW, db, dx


def _pool_freq(a, k):
    """Max over non-overlapping k-bin frequency blocks; ties go to the lowest bin."""
    if k == 1:
        return a, None
    C, D, T = a.shape
    Dp = D // k
    if Dp < 1:
        raise ShapeError(f"cannot pool {D} frequency bins by {k}")
    blocks = a[:, :Dp * k, :].reshape(C, Dp, k, T)
    idx = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def _pool_freq_backward(dout, idx, k, D):
    if k == 1:
        return dout
    C, Dp, T = dout.shape
    dblocks = np.zeros((C, Dp, k, T), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[:, :, None, :], dout[:, :, None, :], axis=2)
    da = np.zeros((C, D, T), dtype=dout.dtype)
    da[:, :Dp * k, :] = dblocks.reshape(C, Dp * k, T)
    return da


def conv_stack_forward(V, params, cfg):
    """Returns (X as D' x T x C, X_concat as (D'*C) x T, per-layer cache)."""
    values = V.values if hasattr(V, "values") else V
    x = np.asarray(values)[None, :, :]
    layers = []
    for layer in range(cfg.conv_layers):
        a, xp = _conv2d_same(x, params[f"conv{layer}_W"], params[f"conv{layer}_b"])
        relu = np.maximum(a, 0.0)
        pooled, idx = _pool_freq(relu, cfg.pool[0])
        layers.append({"xp": xp, "active": a > 0, "idx": idx, "D": a.shape[1]})
        x = pooled
    C, Dp, T = x.shape
    X_concat = x.reshape(C * Dp, T)
    return np.moveaxis(x, 0, -1), X_concat, layers


def _conv_stack_backward(dX_concat, layers, params, cfg, grads):
    if not layers:
        return
    c_last = cfg.conv_channels[-1]
    dx = dX_concat.reshape(c_last, -1, dX_concat.shape[1])
    for layer in reversed(range(len(layers))):
        cache = layers[layer]
        drelu = _pool_freq_backward(dx, cache["idx"], cfg.pool[0], cache["D"])
        da = drelu * cache["active"]
        dW, db, dx = _conv2d_same_backward(da, cache["xp"], params[f"conv{layer}_W"], need_dx=layer > 0)
        grads[f"conv{layer}_W"] += dW
        grads[f"conv{layer}_b"] += db


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def _gru_weights(params, direction):
    return {name: params[f"gru_{direction}_{name}"]
            for name in ("Wg", "Ug", "bg", "Wr", "Ur", "br", "Wh", "Uh", "bh")}


def _gru_step(xg, xr, xh, h_prev, w):
    g = expit(xg + w["Ug"] @ h_prev)
    r = expit(xr + w["Ur"] @ h_prev)
    c = np.tanh(xh + w["Uh"] @ (r * h_prev))
    h = (1.0 - g) * h_prev + g * c
    return h, g, r, c


def gru_cell_forward(x_t, h_prev, params, direction):
    """One GRU update; (1 - g) keeps the previous state, g admits the candidate."""
    w = _gru_weights(params, direction)
    x_t = np.asarray(x_t)
    h_prev = np.asarray(h_prev)
    if x_t.shape != (w["Wg"].shape[1],) or h_prev.shape != (w["Ug"].shape[0],):
        raise ShapeError(f"GRU step got x {x_t.shape}, h {h_prev.shape}; "
                         f"expects x ({w['Wg'].shape[1]},), h ({w['Ug'].shape[0]},)")
    h, g, r, c = _gru_step(w["Wg"] @ x_t + w["bg"], w["Wr"] @ x_t + w["br"],
                           w["Wh"] @ x_t + w["bh"], h_prev, w)
    return h, {"g": g, "r": r, "c": c, "h_prev": h_prev}


def _time_order(T, direction):
    return range(T) if direction == "f" else range(T - 1, -1, -1)


def gru_layer_forward(X, params, direction):
    w = _gru_weights(params, direction)
    F, T = X.shape
    if w["Wg"].shape[1] != F:
        raise ShapeError(f"GRU expects {w['Wg'].shape[1]} input features, got {F}")
    H = w["Ug"].shape[0]
    XG = w["Wg"] @ X + w["bg"][:, None]
    XR = w["Wr"] @ X + w["br"][:, None]
    XH = w["Wh"] @ X + w["bh"][:, None]
    out = np.zeros((H, T), dtype=X.dtype)
    gates = {k: np.zeros((H, T), dtype=X.dtype) for k in ("g", "r", "c", "h_prev")}
    h = np.zeros(H, dtype=X.dtype)
    for t in _time_order(T, direction):
        gates["h_prev"][:, t] = h
        h, g, r, c = _gru_step(XG[:, t], XR[:, t], XH[:, t], h, w)
        out[:, t] = h
        gates["g"][:, t] = g
        gates["r"][:, t] = r
        gates["c"][:, t] = c
    return out, gates


def bigru_forward(X_concat, params, cfg):
    """h_t = [h^f_t; h^b_t]; forward_only keeps h^f_t alone."""
    if cfg.recurrent_mode == "none":
        raise ShapeError("bigru_forward called with recurrent_mode=none")
    h_f, gates_f = gru_layer_forward(X_concat, params, "f")
    if cfg.recurrent_mode == "forward_only":
        return HiddenState(h_f=h_f, gates_f=gates_f)
    h_b, gates_b = gru_layer_forward(X_concat, params, "b")
    return HiddenState(h_f=h_f, h_b=h_b, gates_f=gates_f, gates_b=gates_b)


def _gru_layer_backward(dH, X, gates, params, direction, grads):
    w = _gru_weights(params, direction)
    H, T = dH.shape
    dAG = np.zeros_like(dH)
    dAR = np.zeros_like(dH)
    dAC = np.zeros_like(dH)
    dUg = np.zeros_like(w["Ug"])
    dUr = np.zeros_like(w["Ur"])
    dUh = np.zeros_like(w["Uh"])
    carry = np.zeros(H, dtype=dH.dtype)
    for t in reversed(list(_time_order(T, direction))):
        g, r, c, hp = gates["g"][:, t], gates["r"][:, t], gates["c"][:, t], gates["h_prev"][:, t]
        dh = dH[:, t] + carry
        dc = dh * g
        dg = dh * (c - hp)
        dhp = dh * (1.0 - g)

        dac = dc * (1.0 - c * c)
        dUh += np.outer(dac, r * hp)
        drh = w["Uh"].T @ dac
        dr = drh * hp
        dhp += drh * r

        dag = dg * g * (1.0 - g)
        dUg += np.outer(dag, hp)
        dhp += w["Ug"].T @ dag

        dar = dr * r * (1.0 - r)
        dUr += np.outer(dar, hp)
        dhp += w["Ur"].T @ dar

        dAG[:, t], dAR[:, t], dAC[:, t] = dag, dar, dac
        carry = dhp

    prefix = f"gru_{direction}_"
    for gate, dA in (("g", dAG), ("r", dAR), ("h", dAC)):
        grads[prefix + "W" + gate] += dA @ X.T
        grads[prefix + "b" + gate] += dA.sum(axis=1)
    grads[prefix + "Ug"] += dUg
    grads[prefix + "Ur"] += dUr
    grads[prefix + "Uh"] += dUh
    return w["Wg"].T @ dAG + w["Wr"].T @ dAR + w["Wh"].T @ dAC


# ---------------------------------------------------------------------------
# Output layer and full model
# ---------------------------------------------------------------------------

def dense_sigmoid_forward(H, params, hop_ms=20.0):
    """y_t = sigmoid(W_o h_t + b_o), kept strictly inside (0, 1)."""
    W, b = params["out_W"], params["out_b"]
    if W.shape[1] != H.shape[0]:
        raise ShapeError(f"output layer expects {W.shape[1]} inputs, got {H.shape[0]}")
    Y = expit(W @ H + b[:, None])
    low = np.finfo(Y.dtype).tiny
    high = np.nextafter(Y.dtype.type(1), Y.dtype.type(0))
    return Posteriorgram(values=np.clip(Y, low, high), hop_ms=hop_ms)


def model_forward(V, params, cfg, dtype=np.float64):
    """Full forward pass. Returns (Posteriorgram, cache for model_backward)."""
    values = np.asarray(V.values, dtype=dtype)
    hop_ms = getattr(V, "hop_ms", 20.0)
    if values.ndim != 2:
        raise ShapeError(f"features must be D x T, got shape {values.shape}")
    if dtype != np.float64:
        run_params = {k: v.astype(dtype) for k, v in params.items()}
    else:
        run_params = params
    needed = params["gru_f_Wg"].shape[1] if cfg.recurrent_mode != "none" else params["out_W"].shape[1]
    if recurrent_input_dim(values.shape[0], cfg) != needed:
        raise ShapeError(f"{values.shape[0]} feature bins do not match the model "
                         f"({needed} inputs after the conv stack)")

    _, X_concat, conv_cache = conv_stack_forward(values, run_params, cfg)
    hidden = None
    if cfg.recurrent_mode == "none":
        H = X_concat
    else:
        hidden = bigru_forward(X_concat, run_params, cfg)
        H = hidden.stacked
    Y = dense_sigmoid_forward(H, run_params, hop_ms=hop_ms)

    cache = {
        "cfg": cfg,
        "params": params,
        "fingerprint": params_fingerprint(params),
        "conv": conv_cache,
        "X_concat": X_concat,
        "hidden": hidden,
        "H": H,
        "Y": Y.values,
    }
    return Y, cache


def model_backward(cache, dY):
    """Reverse-mode gradients for every tensor in the cached params."""
    params = cache["params"]
    if params_fingerprint(params) != cache["fingerprint"]:
        raise CacheMismatch("parameters changed since the forward pass")
    Y = cache["Y"]
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != Y.shape:
        raise CacheMismatch(f"upstream gradient {dY.shape} does not match output {Y.shape}")
    cfg = cache["cfg"]
    grads = {name: np.zeros_like(p, dtype=np.float64) for name, p in params.items()}

    dA = dY * Y * (1.0 - Y)
    H = cache["H"]
    grads["out_W"] += dA @ H.T
    grads["out_b"] += dA.sum(axis=1)
    dH = params["out_W"].T @ dA

    X_concat = cache["X_concat"]
    if cfg.recurrent_mode == "none":
        dX = dH
    else:
        hidden = cache["hidden"]
        units = hidden.h_f.shape[0]
        dX = _gru_layer_backward(dH[:units], X_concat, hidden.gates_f, params, "f", grads)
        if cfg.recurrent_mode == "bidirectional":
            dX = dX + _gru_layer_backward(dH[units:], X_concat, hidden.gates_b, params, "b", grads)

    _conv_stack_backward(dX, cache["conv"], params, cfg, grads)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint I/O ("CSM1")
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, cfg, meta=None):
    header = {"model": asdict(cfg)}
    header.update(meta or {})
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            data = np.ascontiguousarray(tensor, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes(order="C"))


def load_checkpoint(path):
    """Returns (params, header). The header holds the model config under 'model'."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise MissingInput(path, "checkpoint", e.strerror or e)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    try:
        pos = 4
        (header_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
        pos += header_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            params[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({e})")
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after tensors")
    return params, header
