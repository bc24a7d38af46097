import numpy as np
import torch


def fd_param_grads(loss_fn, model, h=1e-6) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. every model parameter.

    Independent oracle for the analytic gradients: only forward evaluations,
    no autograd.
    """
    grads = {}
    for name, p in model.named_parameters():
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.view(-1)
        for i in range(flat.shape[0]):
            orig = float(flat[i])
            step = h * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def grad_close(analytic: np.ndarray, fd: np.ndarray, rtol=1e-4, atol=1e-6) -> bool:
    """Match within relative tolerance, with an absolute floor for tiny grads."""
    return bool(np.all(np.abs(analytic - fd) <= atol + rtol * np.abs(fd)))
