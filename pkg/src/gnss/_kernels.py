"""Compiled inner loop for the explicit beam solver."""

import numpy as np
from numba import njit


@njit(cache=True)
def central_difference(ke, minv, fixed, act_dof, prescribed, dt, n_steps, stride, out):
    """Integrate M a = -K u with the central-difference scheme.

    ``ke`` is the (shared) 6x6 element stiffness of a uniform chain, ``minv`` the
    inverse lumped mass per DOF (node-major ``u, w, theta``). Element forces
    are accumulated in element order, so results are bit-reproducible.

    Frames ``0, stride, 2*stride, ...`` are written to ``out[k] = (u, w)``.
    Returns the first step index with a non-finite state, or -1.
    """
    ndof = minv.shape[0]
    n_nodes = ndof // 3
    u_prev = np.zeros(ndof)
    u = np.zeros(ndof)
    u_next = np.zeros(ndof)
    f = np.zeros(ndof)
    dt2 = dt * dt
    for i in range(n_nodes):
        out[0, i, 0] = 0.0
        out[0, i, 1] = 0.0
    frame = 1
    for step in range(n_steps):
        for k in range(ndof):
            f[k] = 0.0
        for e in range(n_nodes - 1):
            base = 3 * e
            for a in range(6):
                acc = 0.0
                for b in range(6):
                    acc += ke[a, b] * u[base + b]
                f[base + a] -= acc
        finite = True
        for k in range(ndof):
            if fixed[k]:
                u_next[k] = 0.0
            else:
                val = 2.0 * u[k] - u_prev[k] + dt2 * minv[k] * f[k]
                u_next[k] = val
                if not np.isfinite(val):
                    finite = False
        if act_dof >= 0:
            u_next[act_dof] = prescribed[step + 1]
        if not finite:
            return step + 1
        for k in range(ndof):
            u_prev[k] = u[k]
            u[k] = u_next[k]
        if (step + 1) % stride == 0 and frame < out.shape[0]:
            for i in range(n_nodes):
                out[frame, i, 0] = u[3 * i]
                out[frame, i, 1] = u[3 * i + 1]
            frame += 1
    return -1
