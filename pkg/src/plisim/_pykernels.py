"""Pure-Python reference kernels; same contracts as ``_ckernels``."""
import math


def euler_lti(A, B, u, x0, q, nsteps, out):
    n = A.shape[0]
    m = B.shape[1]
    A = A.tolist()
    B = B.tolist()
    u = [float(v) for v in u]
    q = float(q)
    bu = []
    for i in range(n):
        r = 0.0
        Bi = B[i]
        for k in range(m):
            r = r + Bi[k] * u[k]
        bu.append(r)
    x = [float(v) for v in x0]
    rows = range(n)
    for s in range(nsteps):
        xn = []
        for i in rows:
            Ai = A[i]
            r = 0.0
            for k in rows:
                r = r + Ai[k] * x[k]
            r = r + bu[i]
            xn.append(x[i] + q * r)
        out[s, :] = xn
        x = xn
        for v in xn:
            if not math.isfinite(v):
                return s
    return -1


def discrete_lti(Ad, c, x0, nsteps, out):
    n = Ad.shape[0]
    Ad = Ad.tolist()
    c = [float(v) for v in c]
    x = [float(v) for v in x0]
    rows = range(n)
    for s in range(nsteps):
        xn = []
        for i in rows:
            Ai = Ad[i]
            r = 0.0
            for k in rows:
                r = r + Ai[k] * x[k]
            xn.append(r + c[i])
        out[s, :] = xn
        x = xn
        for v in xn:
            if not math.isfinite(v):
                return s
    return -1
