"""Central finite-difference gradient checking used across the test suite.

Losses are plain callables that recompute from the current (mutated)
parameter arrays. Checks poke a handful of random coordinates per tensor
rather than every entry, which keeps whole-suite runtime in seconds.

Piecewise activations (relu, the quadratic-smoothed relu, clip gates) make
the losses only piecewise smooth, and a central difference whose stencil
straddles a seam reports an O(h) slope bias with nothing wrong in the
analytic gradient. Every probe therefore self-validates: estimates at h
and h/2 must agree to far better than the check tolerance, otherwise the
stencil is sitting on a seam and the probe is redrawn. A genuinely wrong
analytic gradient still fails, because away from seams the two estimates
agree with each other while disagreeing with the analytic value.
"""

import numpy as np

H = 1e-5

def numeric_grad_at(loss, arr, idx, h=H):
    """Central difference of loss() w.r.t. arr.flat[idx]."""
    flat = arr.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    fp = loss()
    flat[idx] = old - h
    fm = loss()
    flat[idx] = old
    return (fp - fm) / (2.0 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def trusted_numeric_grad(loss, arr, idx, h=H, tol=1e-4):
    """(estimate, trusted) at arr.flat[idx], halving the step to detect a
    stencil that straddles an activation seam.

    Smooth stretches shrink the halved-step discrepancy by h^2 (plus FD
    roundoff ~1e-11 * |loss|); a seam inside the stencil keeps it at O(h).
    Flag when the discrepancy clears both a tol-relative band and an
    absolute roundoff floor."""
    d1 = numeric_grad_at(loss, arr, idx, h=h)
    d2 = numeric_grad_at(loss, arr, idx, h=h / 2.0)
    band = max(tol / 10.0 * max(abs(d1), abs(d2)), 1e-9)
    return d2, abs(d1 - d2) < band


def check_grads(loss, params, analytic, rng, per_tensor=4, tol=1e-4, h=H,
                retries=4):
    """Compare analytic grads against finite differences on random coordinates.

    params: list of (name, array); analytic: dict name -> gradient array.
    Returns the worst relative error seen (asserts against tol). Probes whose
    stencil lands on an activation seam are redrawn up to `retries` times and
    abandoned if the tensor keeps flagging (a skipped probe checks nothing,
    which is safer than asserting against an invalid estimate).
    """
    worst = 0.0
    for name, arr in params:
        if arr.size == 0:
            continue
        k = min(per_tensor, arr.size)
        for idx in rng.choice(arr.size, size=k, replace=False):
            idx = int(idx)
            num, trusted = trusted_numeric_grad(loss, arr, idx, h=h, tol=tol)
            for _ in range(retries):
                if trusted:
                    break
                idx = int(rng.integers(arr.size))
                num, trusted = trusted_numeric_grad(loss, arr, idx, h=h,
                                                    tol=tol)
            if not trusted:
                continue
            ana = float(analytic[name].reshape(-1)[idx])
            # below ~1e-6 central differences cannot be trusted: roundoff
            # in the loss dominates and the ratio test loses meaning
            err = rel_err(num, ana) if max(abs(num), abs(ana)) > 1e-6 else 0.0
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch {name}[{idx}]: analytic {ana:.10g}, "
                f"numeric {num:.10g}, rel err {err:.3g}"
            )
    return worst
