"""Pure numpy versions of the hot kernels.

Same signatures and results as the compiled ``_kernels`` extension; used
when the extension is not built or ``Q2RL_PURE_PYTHON=1`` is set.
"""
import numpy as np

ACT_NONE = 0
ACT_RELU = 1
ACT_TANH = 2


def _grouped(arr, n_groups, rows_per_group):
    return arr.reshape(n_groups, rows_per_group, arr.shape[-1])


def ln_act_forward(z, gain, beta, rows_per_group, act, eps):
    """Layer norm over the last axis followed by an affine map and activation.

    ``z`` is (N, H) with N = G * rows_per_group; row block g uses gain[g], beta[g].
    Returns (out, xhat, rstd).
    """
    n_groups = gain.shape[0]
    mean = z.mean(axis=1, keepdims=True)
    centered = z - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    y = _grouped(xhat, n_groups, rows_per_group) * gain[:, None, :] + beta[:, None, :]
    y = y.reshape(z.shape)
    if act == ACT_RELU:
        out = np.maximum(y, 0.0)
    elif act == ACT_TANH:
        out = np.tanh(y)
    else:
        out = y
    return out, xhat, rstd[:, 0]


def ln_act_backward(dout, out, xhat, rstd, gain, rows_per_group, act):
    """Backward pass of :func:`ln_act_forward`. Returns (dz, dgain, dbeta)."""
    n_groups = gain.shape[0]
    if act == ACT_RELU:
        dy = dout * (out > 0.0)
    elif act == ACT_TANH:
        dy = dout * (1.0 - out * out)
    else:
        dy = dout
    dy_g = _grouped(dy, n_groups, rows_per_group)
    xhat_g = _grouped(xhat, n_groups, rows_per_group)
    dgain = np.sum(dy_g * xhat_g, axis=1)
    dbeta = np.sum(dy_g, axis=1)
    dxhat = (dy_g * gain[:, None, :]).reshape(dy.shape)
    h = dy.shape[1]
    dz = (rstd[:, None] / h) * (
        h * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
    )
    return dz, dgain, dbeta


def discounted_returns(rewards, gamma):
    """G_t = r_t + gamma * G_{t+1} with G_T = 0, evaluated by reverse scan."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    running = 0.0
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out
