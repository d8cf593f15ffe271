"""Direct-formula metric implementations: plain Python loops, no vectorization."""

import math

from conftest import resample_2d_oracle


def _flat(band):
    return [float(v) for v in band.ravel()]


def _mean(xs):
    return sum(xs) / len(xs)


def rmse(f, r):
    per = []
    for b in range(f.shape[0]):
        fs, rs_ = _flat(f[b]), _flat(r[b])
        per.append(math.sqrt(sum((x - y) ** 2 for x, y in zip(fs, rs_)) / len(fs)))
    return _mean(per)


def rmae(f, r):
    per = []
    for b in range(f.shape[0]):
        fs, rs_ = _flat(f[b]), _flat(r[b])
        per.append(100.0 * _mean([abs(x - y) for x, y in zip(fs, rs_)]) / _mean(rs_))
    return _mean(per)


def ergas(f, r, s):
    acc = 0.0
    for b in range(f.shape[0]):
        fs, rs_ = _flat(f[b]), _flat(r[b])
        e = math.sqrt(sum((x - y) ** 2 for x, y in zip(fs, rs_)) / len(fs))
        acc += (e / _mean(rs_)) ** 2
    return 100.0 / s * math.sqrt(acc / f.shape[0])


def sam(f, r):
    angles = []
    c, h, w = f.shape
    for i in range(h):
        for j in range(w):
            u = [float(f[b, i, j]) for b in range(c)]
            v = [float(r[b, i, j]) for b in range(c)]
            nu = math.sqrt(sum(x * x for x in u))
            nv = math.sqrt(sum(x * x for x in v))
            if nu == 0 or nv == 0:
                continue
            cos = sum(x * y for x, y in zip(u, v)) / (nu * nv)
            angles.append(math.degrees(math.acos(max(-1.0, min(1.0, cos)))))
    return _mean(angles)


def q_plain(xs, ys):
    """Wang-Bovik Q in its single-fraction form; None when undefined."""
    mx, my = _mean(xs), _mean(ys)
    vx = _mean([(x - mx) ** 2 for x in xs])
    vy = _mean([(y - my) ** 2 for y in ys])
    cxy = _mean([(x - mx) * (y - my) for x, y in zip(xs, ys)])
    den = (vx + vy) * (mx * mx + my * my)
    if den == 0:
        return None
    return 4 * cxy * mx * my / den


def uiqi(f, r, window=8):
    per = []
    c, h, w = f.shape
    for b in range(c):
        qs = []
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                q = q_plain(_flat(f[b, i : i + window, j : j + window]), _flat(r[b, i : i + window, j : j + window]))
                if q is not None:
                    qs.append(q)
        per.append(_mean(qs))
    return _mean(per)


def d_lambda(f, l):
    c = f.shape[0]
    acc = 0.0
    for b in range(c):
        for k in range(c):
            if b != k:
                acc += abs(q_plain(_flat(f[b]), _flat(f[k])) - q_plain(_flat(l[b]), _flat(l[k])))
    return acc / (c * (c - 1))


def d_s(f, l, pan, s):
    p_lr = resample_2d_oracle(pan[0], l.shape[1], l.shape[2])
    acc = 0.0
    for b in range(f.shape[0]):
        acc += abs(q_plain(_flat(f[b]), _flat(pan[0])) - q_plain(_flat(l[b]), _flat(p_lr)))
    return acc / f.shape[0]


def qnr(f, l, pan, s):
    return (1 - d_lambda(f, l)) * (1 - d_s(f, l, pan, s))
