"""Shared oracles for the test suite."""
import numpy as np
import torch

from pairmotion.motion import IDENTITY_6D, build_representation, detect_foot_contacts, forward_kinematics


def motion_array(skel, rng, t=4, agents=2, jitter=0.05):
    """``(agents, T, C)`` representation of random posed motions."""
    from pairmotion.motion import axis_angle_to_matrix, matrix_to_rot6d
    out = []
    for a in range(agents):
        aa = rng.normal(scale=0.4, size=(t, skel.joint_count - 1, 3))
        rot6 = matrix_to_rot6d(axis_angle_to_matrix(aa))
        yaw = rng.uniform(-np.pi, np.pi)
        root6 = np.tile(matrix_to_rot6d(axis_angle_to_matrix(np.array([0, yaw, 0]))), (t, 1))
        root = np.array([1.5 * a, 0.9, 0.0]) + np.cumsum(rng.normal(scale=jitter, size=(t, 3)), axis=0)
        pos = forward_kinematics(skel, root, rot6, root6)
        contacts = rng.integers(0, 2, size=(t, 4))
        out.append(build_representation(pos, rot6, contacts))
    return np.stack(out)


def central_fd_check(fn, params, eps=1e-6, n_probe=None, rng=None):
    """Largest relative error between autograd and central differences over the given float64 tensors.

    Relative error is ``|g - fd| / max(|g|, |fd|, 1e-8)`` computed on the full
    gradient vector norm per tensor (so tiny individual entries cannot dominate).
    The 1e-6 floor keeps analytically-zero gradients (e.g. attention key
    biases, which softmax is invariant to) from comparing FD round-off to zero.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if n_probe is not None and flat.numel() > n_probe:
            idx = rng.choice(flat.numel(), n_probe, replace=False)
        fd = np.empty(len(idx))
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                fd[k] = (up - down) / (2 * eps)
        ga = g.reshape(-1).detach().numpy()[idx]
        denom = max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-6)
        worst = max(worst, float(np.linalg.norm(ga - fd) / denom))
    return worst
