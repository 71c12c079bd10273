"""Independent plain-numpy reference implementations used by the tests.

Nothing here imports the autodiff engine; every routine is written as the
obvious loop so it can serve as a brute-force oracle.
"""
import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x / (1.0 + np.exp(-x))


def relu(x):
    return np.maximum(x, 0.0)


def arrays(p):
    """Plain-array view of an SsmParams."""
    return {k: (None if v is None else v.data) for k, v in vars(p).items()}


def selective_scan_two_loop(u, p):
    """Recurrence over time, then over inner channels, one state vector at a time."""
    q = arrays(p)
    L, di = u.shape
    A = -np.exp(q["a_log"])
    h = np.zeros((di, A.shape[1]))
    y = np.zeros((L, di))
    for t in range(L):
        delta = softplus(u[t] @ q["dt_down"] @ q["dt_up"] + q["dt_bias"])
        B = u[t] @ q["b_proj"]
        C = u[t] @ q["c_proj"]
        for i in range(di):
            h[i] = np.exp(delta[i] * A[i]) * h[i] + delta[i] * B * u[t, i]
            y[t, i] = h[i] @ C
            if q["skip"] is not None:
                y[t, i] += q["skip"][i] * u[t, i]
    return y


def selective_scan_loop(u, p):
    """Same recurrence, vectorised over channels (for long sequences)."""
    q = arrays(p)
    L, di = u.shape
    A = -np.exp(q["a_log"])
    delta = softplus(u @ q["dt_down"] @ q["dt_up"] + q["dt_bias"])
    B, C = u @ q["b_proj"], u @ q["c_proj"]
    h = np.zeros_like(A)
    y = np.zeros((L, di))
    for t in range(L):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * u[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t]
    if q["skip"] is not None:
        y += q["skip"] * u
    return y


def causal_conv(x, k, b):
    L, d = x.shape
    w = k.shape[0]
    y = np.tile(b, (L, 1)).astype(float)
    for t in range(L):
        for j in range(w):
            src = t - w + 1 + j
            if src >= 0:
                y[t] += k[j] * x[src]
    return y


def mamba(x, p, gate="silu"):
    q = arrays(p)
    di = q["a_log"].shape[0]
    xz = x @ q["in_w"] + q["in_b"]
    u, z = xz[:, :di], xz[:, di:]
    u = silu(causal_conv(u, q["conv_k"], q["conv_b"]))
    y = selective_scan_two_loop(u, p)
    g = silu(z) if gate == "silu" else relu(z)
    return (y * g) @ q["out_w"] + q["out_b"]


def bimamba(x, p):
    xf = mamba(x, p.fwd, "relu")
    xb = mamba(x[::-1], p.bwd, "relu")[::-1]
    return (xf + xb) @ p.fuse_w.data + p.fuse_b.data


def random_ssm(init, cfg, seed):
    """Initialised params with every tensor randomised to a generic point."""
    rng = np.random.default_rng(seed)
    p = init(cfg, rng)
    for name, t in vars(p).items():
        if t is None:
            continue
        if name == "a_log":
            t.data[...] = np.log(rng.uniform(0.5, 2.0, size=t.shape))
        elif name == "dt_bias":
            t.data[...] = rng.uniform(-1.0, 1.0, size=t.shape)
        else:
            t.data[...] = rng.normal(0.0, 0.5, size=t.shape)
    return p
