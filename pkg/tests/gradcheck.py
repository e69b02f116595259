"""Central-difference gradient oracle shared by the test modules.

All analytic gradients in the package are checked against
(f(x+h) - f(x-h)) / 2h with h = 1e-3. Forward passes run in float32, so
the difference quotient carries roundoff of roughly eps * |f| / h; with
|f| kept near 1 by mean-style losses that is about 6e-5, hence the
absolute floor of 1e-4 alongside the 1e-3 relative tolerance.
"""

import numpy as np

from spikevae.engine import no_grad, reset_tape

H = 1e-3
RTOL = 1e-3
ATOL = 1e-4


def numeric_grad(f, x, h=H):
    """Gradient of the scalar ``f(x)`` by central differences.

    ``f`` receives the same ndarray object each call (perturbed in
    place), so it must not cache or mutate it. Runs with recording off;
    nothing lands on the tape.
    """
    x = np.array(x, dtype=np.float32)
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + np.float32(h)
            fp = float(f(x))
            flat[i] = keep - np.float32(h)
            fm = float(f(x))
            flat[i] = keep
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def assert_grad_matches(f, x, analytic, h=H, rtol=RTOL, atol=ATOL, label=""):
    """Compare an analytic gradient for ``x`` against the numeric one."""
    numeric = numeric_grad(f, x, h=h)
    analytic = np.asarray(analytic, dtype=np.float64)
    assert analytic.shape == numeric.shape, (
        f"{label}: gradient shape {analytic.shape} vs numeric {numeric.shape}"
    )
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol,
                               err_msg=f"gradient mismatch: {label}")
    reset_tape()
