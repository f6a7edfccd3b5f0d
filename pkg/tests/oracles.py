"""Independent brute-force reference implementations used by the tests.

Everything here is written with plain Python loops and shares no code with
the package under test.
"""
import math
from collections import deque
from itertools import product


def bfs_components(mask, connectivity=26):
    """Label foreground voxels of a nested-list/ndarray mask by BFS."""
    nx, ny, nz = mask.shape
    if connectivity == 6:
        offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        offsets = [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    seen = set()
    comps = []
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z] or (x, y, z) in seen:
                    continue
                comp = []
                queue = deque([(x, y, z)])
                seen.add((x, y, z))
                while queue:
                    c = queue.popleft()
                    comp.append(c)
                    for dx, dy, dz in offsets:
                        n = (c[0] + dx, c[1] + dy, c[2] + dz)
                        if 0 <= n[0] < nx and 0 <= n[1] < ny and 0 <= n[2] < nz \
                                and mask[n] and n not in seen:
                            seen.add(n)
                            queue.append(n)
                comps.append(comp)
    return comps


def trilinear_at(data, x, y, z):
    """Value at continuous voxel coordinate, clamped to the grid, via 8 neighbours."""
    nx, ny, nz = data.shape
    x = min(max(x, 0.0), nx - 1)
    y = min(max(y, 0.0), ny - 1)
    z = min(max(z, 0.0), nz - 1)
    x0, y0, z0 = int(math.floor(x)), int(math.floor(y)), int(math.floor(z))
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                xi, yi, zi = min(x0 + dx, nx - 1), min(y0 + dy, ny - 1), min(z0 + dz, nz - 1)
                wx = (x - x0) if dx else (1 - (x - x0))
                wy = (y - y0) if dy else (1 - (y - y0))
                wz = (z - z0) if dz else (1 - (z - z0))
                total += wx * wy * wz * float(data[xi, yi, zi])
    return total


def staple_brute_force(masks, init_p=0.99, init_q=0.99, gamma=None, tol=1e-7,
                       max_iters=100, clamp_eps=1e-7):
    """Binary STAPLE with naive loops.

    ``masks`` is a list of flat 0/1 sequences (one per rater). Returns the list
    of (W, p, q) after each iteration and the final consensus.
    Iteration = E-step then M-step; stop when max |dW| < tol.
    """
    R = len(masks)
    N = len(masks[0])
    if gamma is None:
        fg = 0
        for j in range(R):
            for i in range(N):
                fg += masks[j][i]
        gamma = fg / (N * R)
    gamma = min(max(gamma, 1e-6), 1 - 1e-6)
    lg = math.log(gamma)
    l1g = math.log(1 - gamma)
    p = [init_p] * R
    q = [init_q] * R
    history = []
    W_prev = None
    for _ in range(max_iters):
        W = [0.0] * N
        lp = [math.log(p[j]) for j in range(R)]
        l1p = [math.log(1 - p[j]) for j in range(R)]
        lq = [math.log(q[j]) for j in range(R)]
        l1q = [math.log(1 - q[j]) for j in range(R)]
        for i in range(N):
            la = lg
            lb = l1g
            for j in range(R):
                if masks[j][i]:
                    la += lp[j]
                    lb += l1q[j]
                else:
                    la += l1p[j]
                    lb += lq[j]
            W[i] = 1.0 / (1.0 + math.exp(lb - la)) if lb - la < 700 else 0.0
        sw = 0.0
        snw = 0.0
        for i in range(N):
            sw += W[i]
            snw += 1 - W[i]
        for j in range(R):
            num_p = 0.0
            num_q = 0.0
            for i in range(N):
                if masks[j][i]:
                    num_p += W[i]
                else:
                    num_q += 1 - W[i]
            if sw > 0:
                p[j] = num_p / sw
            if snw > 0:
                q[j] = num_q / snw
            p[j] = min(max(p[j], clamp_eps), 1 - clamp_eps)
            q[j] = min(max(q[j], clamp_eps), 1 - clamp_eps)
        history.append((list(W), list(p), list(q)))
        if W_prev is not None and max(abs(a - b) for a, b in zip(W, W_prev)) < tol:
            break
        W_prev = W
    consensus = [1 if w >= 0.5 else 0 for w in history[-1][0]]
    return history, consensus
