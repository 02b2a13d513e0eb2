import torch


def central_fd(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (every entry)."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = f(x).item()
            flat[i] = old - eps
            lo = f(x).item()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return ((a - b).norm() / b.norm().clamp_min(1e-30)).item()
