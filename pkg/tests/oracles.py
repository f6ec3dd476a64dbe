"""Independent reference implementations used by the tests.

Everything here is deliberately naive: loops, direct formulas, no shared
code paths with the package beyond plain forward passes.
"""

import itertools

import numpy as np

from houghcnn.net import layers as L
from houghcnn.net.arch import Conv, Pool
from houghcnn.net import init_msra, loss_softmax_xent, parse_arch, receptive_field
from houghcnn.houghdb import HoughDatabase
from houghcnn.patch import extract_patches, margin, to_network_input


# -- gradients -------------------------------------------------------------

REL_FLOOR = 1e-6  # below this combined magnitude the relative error is taken against the floor


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), REL_FLOOR)


def _fd_net(name, rank, seed, width, batch, input_size=None):
    rng = np.random.default_rng(seed)
    base = parse_arch(name, rank=rank, num_classes=3, width=width, hidden=width)
    size = input_size or receptive_field(base) + 1
    arch = parse_arch(name, rank=rank, num_classes=3, width=width, hidden=width, input_size=size)
    net = init_msra(arch, seed=seed, dtype=np.float64)
    for p in net.params:
        if "b" in p:
            p["b"] = 0.1 * rng.standard_normal(p["b"].shape)
        if "alpha" in p:
            p["alpha"] = rng.uniform(0.05, 0.5, p["alpha"].shape)
    x = rng.standard_normal((batch,) + net.input_shape())
    y = rng.integers(0, 3, batch)
    return net, x, y, rng


class _TailLoss:
    """Loss after perturbing one parameter entry, computed without a full forward.

    One unperturbed pass caches every layer's input, pre-activation ``z`` and
    im2col columns. Changing a single weight of layer ``i`` changes exactly
    one output channel of ``z_i`` (by ``step`` times one input column), so the
    perturbed ``z_i`` is formed directly and only layers after ``i`` are run,
    with many probes stacked along the batch axis. Each probe also reports
    whether it stayed on the same side of every kink (PReLU argument signs,
    pool winners) as the unperturbed pass.
    """

    def __init__(self, net, x, y):
        self.net, self.y, self.B = net, y, len(x)
        self.layers = net.arch.layers
        self.inputs, self.cols, self.z, self.kinks = [], [], [], []
        h = np.asarray(x, np.float64)
        for i in range(len(self.layers)):
            self.inputs.append(h)
            layer = self.layers[i]
            self.cols.append(L.im2col(h, layer.size)[0] if isinstance(layer, Conv) else
                             h.reshape(len(h), -1) if not isinstance(layer, Pool) else None)
            h, z, k = self._run_layer(i, h)
            self.z.append(z)
            self.kinks.append(k)

    def _run_layer(self, i, h, z=None):
        layer, p = self.layers[i], self.net.params[i]
        if isinstance(layer, Pool):
            out, arg = L.pool_forward(h, layer.size, layer.stride)
            return out, None, arg
        if z is None:
            if isinstance(layer, Conv):
                cols, sp = L.im2col(h, layer.size)
                z = (cols @ L._kernel_matrix(p["W"]) + p["b"]).reshape(sp + (p["W"].shape[-1],))
            else:
                z = h.reshape(len(h), -1) @ p["W"] + p["b"]
        if i == len(self.layers) - 1:
            return z, z, None
        return L.prelu_forward(z, p["alpha"]), z, z >= 0

    def _perturbed_z(self, i, key, j, step):
        """Pre-activation of layer ``i`` and its output channel after ``param[key][j] += step``."""
        p, z = self.net.params[i], self.z[i].copy()
        shape = p[key].shape
        if key == "W":
            idx = np.unravel_index(j, shape)
            out = idx[-1]
            if isinstance(self.layers[i], Conv):
                row = np.ravel_multi_index(idx[1:-1] + idx[:1], shape[1:-1] + shape[:1])
            else:
                row = idx[0]
            z[..., out] += (step * self.cols[i][:, row]).reshape(z.shape[:-1])
        elif key == "b":
            out = j
            z[..., out] += step
        else:
            out = j
        return z, out

    def _next_conv(self, i):
        """Index of the conv layer reached from conv layer ``i`` through pools only, else None."""
        if not isinstance(self.layers[i], Conv):
            return None
        k = i + 1
        while k < len(self.layers) and isinstance(self.layers[k], Pool):
            k += 1
        return k if k < len(self.layers) and isinstance(self.layers[k], Conv) else None

    def losses(self, i, key, entries, step):
        """``(loss(+step), loss(-step), kink_free)`` arrays for each entry of ``params[i][key]``."""
        p = self.net.params[i]
        stacked, chans, ok = [], [], []
        for j in entries:
            for s in (step, -step):
                z, out = self._perturbed_z(i, key, j, s)
                if key == "alpha":
                    a = p["alpha"].copy()
                    a[out] += s
                    h = L.prelu_forward(z, a)
                else:
                    h = self._run_layer(i, None, z)[0]
                stacked.append(h)
                chans.append(out)
                ok.append(i == len(self.layers) - 1 or np.array_equal(z >= 0, self.kinks[i]))
        n, B = len(stacked), self.B
        nxt = self._next_conv(i)
        if nxt is None:
            h, start = np.concatenate(stacked), i + 1
        else:
            # only channel ``out`` of this layer's output moved; carry just that channel
            # through the pools and add its convolution to the next layer's cached z
            hc = np.concatenate([h[..., c:c + 1] for h, c in zip(stacked, chans)])
            for k in range(i + 1, nxt):
                layer = self.layers[k]
                hc, arg = L.pool_forward(hc, layer.size, layer.stride)
                arg = arg.reshape((n, B) + arg.shape[1:])
                ok = [o and np.array_equal(arg[q][..., 0], self.kinks[k][..., c]) for q, (o, c) in enumerate(zip(ok, chans))]
            hc = hc.reshape((n, B) + hc.shape[1:])
            W = self.net.params[nxt]["W"]
            Km, cin = L._kernel_matrix(W), W.shape[0]
            win = Km.shape[0] // cin
            z = np.empty((n,) + self.z[nxt].shape)
            for q, c in enumerate(chans):
                delta = hc[q] - self.inputs[nxt][..., c:c + 1]
                dcols, sp = L.im2col(delta, self.layers[nxt].size)
                z[q] = self.z[nxt] + (dcols @ Km[np.arange(win) * cin + c]).reshape(sp + (W.shape[-1],))
            h, _, kink = self._run_layer(nxt, None, z.reshape((n * B,) + z.shape[2:]))
            kink = kink.reshape((n, B) + kink.shape[1:])
            ok = [o and np.array_equal(kink[q], self.kinks[nxt]) for q, o in enumerate(ok)]
            start = nxt + 1
        for k in range(start, len(self.layers)):
            h, _, kink = self._run_layer(k, h)
            if kink is not None:
                kink = kink.reshape((n, B) + kink.shape[1:])
                ok = [o and np.array_equal(kink[q], self.kinks[k]) for q, o in enumerate(ok)]
        h = h.reshape((n, B) + h.shape[1:])
        loss = np.array([loss_softmax_xent(h[q], self.y)[0] for q in range(n)])
        ok = np.array(ok)
        return loss[0::2], loss[1::2], ok[0::2] & ok[1::2]


def gradcheck_net(name, rank, seed=0, width=8, batch=2, eps=1e-5, max_entries=None, input_size=None,
                  budget=2e7):
    """Max relative error between backprop and central differences over parameters.

    ``max_entries`` caps how many entries of each parameter array are probed
    (a fixed pseudo-random subset); ``None`` checks every entry. A central
    difference is only meaningful when neither perturbed pass crosses a PReLU
    kink or flips a pooling winner; such probes are repeated with steps
    ``eps / 10`` and ``eps / 100`` and the first kink-free one is used.
    Probes are stacked so that one block holds about ``budget`` cached values.
    Returns ``(worst, n_checked, worst_where, n_reprobed)``.
    """
    net, x, y, rng = _fd_net(name, rank, seed, width, batch, input_size)
    s, _ = net.forward(x)
    grads = net.backward(loss_softmax_xent(s, y)[1])
    tail = _TailLoss(net, x, y)
    per_sample = [sum(h.size for h in tail.inputs[i:]) + sum(c.size for c in tail.cols[i:] if c is not None)
                  for i in range(len(tail.inputs))]
    worst, count, where, reprobed = 0.0, 0, None, 0
    for li, (p, gp) in enumerate(zip(net.params, grads)):
        for k, arr in p.items():
            idx = np.arange(arr.size)
            if max_entries is not None and arr.size > max_entries:
                idx = np.sort(rng.choice(arr.size, max_entries, replace=False))
            ga = gp[k].reshape(-1)
            block = max(1, int(budget // (2 * per_sample[li])))
            for start in range(0, len(idx), block):
                js = idx[start:start + block]
                num = np.full(len(js), np.nan)
                todo = np.ones(len(js), bool)
                for step in (eps, eps / 10, eps / 100):
                    lp, lm, ok = tail.losses(li, k, js[todo], step)
                    vals = (lp - lm) / (2 * step)
                    sel = np.nonzero(todo)[0]
                    num[sel] = vals  # last step is kept even if it still crosses
                    reprobed += int((~ok).sum())
                    todo[sel[ok]] = False
                    if not todo.any():
                        break
                e = rel_err(ga[js], num)
                count += len(js)
                q = int(np.argmax(e))
                if e[q] > worst:
                    worst, where = float(e[q]), (li, k, int(js[q]), float(ga[js[q]]), float(num[q]))
    return worst, count, where, reprobed


def directional_check(name, rank, seed=0, width=8, eps=1e-5, trials=5):
    """Compare <grad, d> with a central difference along random full-parameter directions."""
    net, x, y, rng = _fd_net(name, rank, seed, width, 2)
    s, _ = net.forward(x)
    grads = net.backward(loss_softmax_xent(s, y)[1])
    worst = 0.0
    for _ in range(trials):
        dirs = [{k: rng.standard_normal(v.shape) for k, v in p.items()} for p in net.params]
        analytic = sum(float((g[k] * d[k]).sum()) for g, d in zip(grads, dirs) for k in d)
        vals = []
        for sign in (1, -1):
            for p, d in zip(net.params, dirs):
                for k in d:
                    p[k] += sign * eps * d[k]
            vals.append(loss_softmax_xent(net.forward(x)[0], y)[0])
            for p, d in zip(net.params, dirs):
                for k in d:
                    p[k] -= sign * eps * d[k]
        worst = max(worst, float(rel_err(analytic, (vals[0] - vals[1]) / (2 * eps))))
    return worst


# -- dense evaluation -------------------------------------------------------


def patchwise(net, vol, mode, centers=None, batch_size=512):
    """Scores and features by running every interior patch (or just ``centers``) through ``forward``."""
    p = net.arch.input_size
    half = margin(mode, p)
    dims = vol.dims
    if centers is None:
        ranges = [range(h, n - h) for h, n in zip(half, dims)]
        centers = np.array(list(itertools.product(*ranges)))
    x = to_network_input(extract_patches(vol, centers, mode, p), mode)
    scores, feats = net.predict(x, batch_size=batch_size)
    return centers, scores, feats


# -- K-NN -------------------------------------------------------------------


def knn_brute(data, q, K, max_dist=np.inf):
    """Straight scan: distances by explicit loop sum, sort by (distance, index)."""
    data = np.asarray(data, np.float64)
    q = np.asarray(q, np.float64)
    dist = np.array([np.sqrt(np.sum((row - q) ** 2)) for row in data])
    order = sorted(range(len(data)), key=lambda i: (dist[i], i))
    return [(i, dist[i]) for i in order if dist[i] < max_dist][:K]


# -- Hough voting -----------------------------------------------------------


def toy_instance(seed=0, n_rec=50, dims=(20, 20, 20), n_q=30, d=6):
    """Synthetic database with votes scattered around one center, plus query voxels in z-y-x order."""
    r = np.random.default_rng(seed)
    center = np.array([10, 9, 11])
    feats = r.standard_normal((n_rec, d))
    pos = r.integers(4, 16, (n_rec, 3))
    votes = (center - pos + r.normal(0, 0.8, (n_rec, 3))).astype(np.float32)
    patches = (r.random((n_rec, 9, 9, 9)) < 0.6).astype(np.uint8)
    db = HoughDatabase(1, feats, votes, pos, np.zeros(n_rec), inline_masks=patches)
    qpos = r.integers(3, 17, (n_q, 3))
    order = np.lexsort((qpos[:, 0], qpos[:, 1], qpos[:, 2]))
    qpos = qpos[order]
    qf = feats[r.integers(0, n_rec, n_q)] + 0.3 * r.standard_normal((n_q, d))
    return db, qpos, qf, dims


def hough_reference(positions, features, db_feats, db_votes, db_patches, dims, K, max_dist,
                    sigma, r, eps_w=1e-6):
    """Sequential straight-line voting pipeline with no acceleration structures.

    Returns ``(vote_map, smoothed, centroid, survivor_list, seg_map)``.
    """
    nx, ny, nz = dims
    vm = np.zeros(dims)
    votes = []
    for pos, f in zip(positions, features):
        for rec, d in knn_brute(db_feats, f, K, max_dist):
            land = [pos[a] + float(db_votes[rec][a]) for a in range(3)]
            cell = [int(np.floor(v + 0.5)) for v in land]
            if not all(0 <= cell[a] < dims[a] for a in range(3)):
                continue
            w = 1.0 / max(d, eps_w)
            vm[cell[0], cell[1], cell[2]] += w
            votes.append((tuple(int(v) for v in pos), land, w, rec))
    if not np.any(vm > 0):
        return vm, vm, None, [], np.zeros(dims)
    # Gaussian kernel truncated at 3 sigma, renormalised, applied by direct 3D summation
    rad = int(3.0 * sigma + 0.5)
    t = np.arange(-rad, rad + 1)
    k1 = np.exp(-0.5 * (t / sigma) ** 2)
    k1 /= k1.sum()
    sm = np.zeros(dims)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                acc = 0.0
                for i, di in enumerate(t):
                    xi = x + di
                    if not 0 <= xi < nx:
                        continue
                    for j, dj in enumerate(t):
                        yj = y + dj
                        if not 0 <= yj < ny:
                            continue
                        for kk, dk in enumerate(t):
                            zk = z + dk
                            if 0 <= zk < nz and vm[xi, yj, zk] != 0:
                                acc += k1[i] * k1[j] * k1[kk] * vm[xi, yj, zk]
                sm[x, y, z] = acc
    best, centroid = -1.0, None
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if sm[x, y, z] > best:
                    best, centroid = sm[x, y, z], (x, y, z)
    surv = [v for v in votes if np.sqrt(sum((v[1][a] - centroid[a]) ** 2 for a in range(3))) < r]
    S = np.zeros(dims)
    for pos, _, w, rec in surv:
        patch = db_patches[rec]
        h = patch.shape[0] // 2
        for a, b, c in itertools.product(range(patch.shape[0]), repeat=3):
            x, y, z = pos[0] + a - h, pos[1] + b - h, pos[2] + c - h
            if 0 <= x < nx and 0 <= y < ny and 0 <= z < nz:
                S[x, y, z] += w * patch[a, b, c]
    if S.max() > 0:
        S = S / S.max()
    return vm, sm, centroid, surv, S


# -- metrics ----------------------------------------------------------------


def dice_brute(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    inter = sum(1 for u, v in zip(a, b) if u and v)
    na, nb = sum(1 for u in a if u), sum(1 for v in b if v)
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def boundary_brute(m):
    m = np.asarray(m, bool)
    out = []
    for x, y, z in zip(*np.nonzero(m)):
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            u, v, w = x + d[0], y + d[1], z + d[2]
            inside = 0 <= u < m.shape[0] and 0 <= v < m.shape[1] and 0 <= w < m.shape[2]
            if not inside or not m[u, v, w]:
                out.append((x, y, z))
                break
    return out


def msd_brute(pred, gt, spacing=(1.0, 1.0, 1.0)):
    bp, bg = boundary_brute(pred), boundary_brute(gt)
    sp = np.asarray(spacing, np.float64)
    G = np.array(bg, np.float64) * sp
    total = 0.0
    for p in bp:
        d2 = (((np.asarray(p, np.float64) * sp) - G) ** 2).sum(axis=1)
        total += float(np.sqrt(d2.min()))
    return total / len(bp)
