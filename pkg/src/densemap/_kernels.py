"""Compiled inner loops for ray integration.

Every kernel releases the GIL so the integrator can drive them from worker
threads. Termination-set buckets are int64 words; a bucket read and a bucket
write are each a single aligned 64-bit access.
"""

import numpy as np
from numba import njit

EMPTY = np.int64(-1)

_OFF = np.int64(1 << 20)

# ray status codes
NOT_PROCESSED = 0
CAST = 1
DISCARDED_START = 2
SKIPPED_RANGE = 3


@njit(cache=True, nogil=True, inline="always")
def pack_index(x, y, z):
    return ((np.int64(x) + _OFF) << 42) | ((np.int64(y) + _OFF) << 21) | (np.int64(z) + _OFF)


@njit(cache=True, nogil=True, inline="always")
def bucket_of(key, mask):
    z = np.uint64(key)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return np.int64(z & np.uint64(mask))


@njit(cache=True, nogil=True)
def set_exchange(buckets, key):
    """Publish ``key`` into its bucket; True iff the bucket already held ``key``."""
    b = bucket_of(key, buckets.shape[0] - 1)
    old = buckets[b]
    if old == key:
        return True
    buckets[b] = key
    return False


@njit(cache=True, nogil=True)
def ray_bounds(points, origin, voxel_size, truncation):
    """Upper bound on voxels visited by each ray (surface + truncation back to origin)."""
    n = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        dx = points[i, 0] - origin[0]
        dy = points[i, 1] - origin[1]
        dz = points[i, 2] - origin[2]
        r = np.sqrt(dx * dx + dy * dy + dz * dz)
        if r <= 0.0:
            out[i] = 1
            continue
        total = 1
        for a in range(3):
            d = points[i, a] - origin[a]
            far = points[i, a] + truncation * d / r
            total += abs(np.int64(np.floor(far / voxel_size)) - np.int64(np.floor(origin[a] / voxel_size)))
        out[i] = total + 2
    return out


@njit(cache=True, nogil=True)
def traverse(
    points,
    origin,
    voxel_size,
    truncation,
    max_ray_length,
    first,
    last,
    offsets,
    out_vox,
    out_sdf,
    counts,
    status,
    terminated,
    start_set,
    observed_set,
    use_start_rule,
    use_observed_rule,
):
    """Cast rays ``first..last-1`` from surface + truncation back toward the origin.

    Each visited voxel is written at ``offsets[i] + k`` with its truncated
    projective signed distance (positive on the camera side).
    """
    half = voxel_size * 0.5
    for i in range(first, last):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        dx = px - origin[0]
        dy = py - origin[1]
        dz = pz - origin[2]
        r = np.sqrt(dx * dx + dy * dy + dz * dz)
        if r <= 0.0 or r > max_ray_length:
            status[i] = SKIPPED_RANGE
            continue
        ux = dx / r
        uy = dy / r
        uz = dz / r
        if use_start_rule:
            key = pack_index(np.floor(px / half), np.floor(py / half), np.floor(pz / half))
            if set_exchange(start_set, key):
                status[i] = DISCARDED_START
                continue
        status[i] = CAST
        # continuous voxel coordinates of segment start (behind surface) and end (camera)
        sx = (px + truncation * ux) / voxel_size
        sy = (py + truncation * uy) / voxel_size
        sz = (pz + truncation * uz) / voxel_size
        ex = origin[0] / voxel_size
        ey = origin[1] / voxel_size
        ez = origin[2] / voxel_size
        cx = np.int64(np.floor(sx))
        cy = np.int64(np.floor(sy))
        cz = np.int64(np.floor(sz))
        lx = np.int64(np.floor(ex))
        ly = np.int64(np.floor(ey))
        lz = np.int64(np.floor(ez))
        vx = ex - sx
        vy = ey - sy
        vz = ez - sz
        stx = 1 if vx > 0 else -1
        sty = 1 if vy > 0 else -1
        stz = 1 if vz > 0 else -1
        inf = np.inf
        if vx != 0.0:
            tmx = ((cx + (1 if vx > 0 else 0)) - sx) / vx
            tdx = abs(1.0 / vx)
        else:
            tmx = inf
            tdx = inf
        if vy != 0.0:
            tmy = ((cy + (1 if vy > 0 else 0)) - sy) / vy
            tdy = abs(1.0 / vy)
        else:
            tmy = inf
            tdy = inf
        if vz != 0.0:
            tmz = ((cz + (1 if vz > 0 else 0)) - sz) / vz
            tdz = abs(1.0 / vz)
        else:
            tmz = inf
            tdz = inf
        base = offsets[i]
        cap = offsets[i + 1] - base
        k = 0
        run = 0
        while k < cap:
            if use_observed_rule:
                if set_exchange(observed_set, pack_index(cx, cy, cz)):
                    run += 1
                    if run >= 2:
                        terminated[i] = 1
                        break
                else:
                    run = 0
            ccx = (cx + 0.5) * voxel_size
            ccy = (cy + 0.5) * voxel_size
            ccz = (cz + 0.5) * voxel_size
            sdf = (px - ccx) * ux + (py - ccy) * uy + (pz - ccz) * uz
            if sdf > truncation:
                sdf = truncation
            elif sdf < -truncation:
                sdf = -truncation
            out_vox[base + k, 0] = cx
            out_vox[base + k, 1] = cy
            out_vox[base + k, 2] = cz
            out_sdf[base + k] = sdf
            k += 1
            if cx == lx and cy == ly and cz == lz:
                break
            if tmx <= tmy and tmx <= tmz:
                if tmx > 1.0:
                    break
                cx += stx
                tmx += tdx
            elif tmy <= tmz:
                if tmy > 1.0:
                    break
                cy += sty
                tmy += tdy
            else:
                if tmz > 1.0:
                    break
                cz += stz
                tmz += tdz
        counts[i] = k


@njit(cache=True, nogil=True)
def compact(offsets, counts, out_vox, out_sdf):
    """Gather the valid prefix of every ray's buffer into contiguous arrays."""
    n = counts.shape[0]
    total = 0
    for i in range(n):
        total += counts[i]
    vox = np.empty((total, 3), dtype=np.int64)
    sdf = np.empty(total, dtype=np.float64)
    ray = np.empty(total, dtype=np.int64)
    j = 0
    for i in range(n):
        b = offsets[i]
        for k in range(counts[i]):
            vox[j, 0] = out_vox[b + k, 0]
            vox[j, 1] = out_vox[b + k, 1]
            vox[j, 2] = out_vox[b + k, 2]
            sdf[j] = out_sdf[b + k]
            ray[j] = i
            j += 1
    return vox, sdf, ray


@njit(cache=True, nogil=True)
def apply_updates(
    dist, weight, color, slots, lin, sdf, ray, ray_color, truncation, max_weight, n_owners, owner
):
    """Sequential weighted-average TSDF update (new-sample weight 1).

    With ``n_owners > 1`` only blocks whose slot maps to ``owner`` are written,
    giving each worker exclusive ownership of a disjoint set of blocks.
    """
    for k in range(slots.shape[0]):
        s = slots[k]
        if n_owners > 1 and s % n_owners != owner:
            continue
        i = lin[k]
        w = np.float64(weight[s, i])
        d = np.float64(dist[s, i])
        d_new = sdf[k]
        wsum = w + 1.0
        dist[s, i] = (w * d + d_new) / wsum
        if abs(d_new) < truncation:
            r = ray[k]
            for ch in range(3):
                c = (w * np.float64(color[s, i, ch]) + np.float64(ray_color[r, ch])) / wsum
                color[s, i, ch] = np.uint8(min(255.0, np.floor(c + 0.5)))
        weight[s, i] = min(wsum, max_weight)


@njit(cache=True, nogil=True)
def merge_samples(dist, weight, color, slots, lin, s_dist, s_weight, s_color, max_weight):
    """Weighted-average merge of resampled voxels into destination storage."""
    for k in range(slots.shape[0]):
        s = slots[k]
        i = lin[k]
        ws = s_weight[k]
        if ws <= 0.0:
            continue
        wd = np.float64(weight[s, i])
        wsum = wd + ws
        dist[s, i] = (wd * np.float64(dist[s, i]) + ws * s_dist[k]) / wsum
        for ch in range(3):
            c = (wd * np.float64(color[s, i, ch]) + ws * np.float64(s_color[k, ch])) / wsum
            color[s, i, ch] = np.uint8(min(255.0, np.floor(c + 0.5)))
        weight[s, i] = min(wsum, max_weight)


@njit(cache=True, nogil=True)
def _find_slot(keys, slots, key):
    pos = np.searchsorted(keys, key)
    if pos < keys.shape[0] and keys[pos] == key:
        return slots[pos]
    return -1


@njit(cache=True, nogil=True, inline="always")
def _snap(u):
    b = np.floor(u)
    f = u - b
    if f > 1.0 - 1e-6:
        return np.int64(b) + 1, 0.0
    if f < 1e-6:
        return np.int64(b), 0.0
    return np.int64(b), f


@njit(cache=True, nogil=True)
def trilinear(points, voxel_size, B, keys, slots, dist, weight, color, out_d, out_w, out_c, valid):
    """Trilinear interpolation between voxel centers.

    Corners whose interpolation coefficient is exactly zero are not required;
    every other corner must be allocated with positive weight.
    """
    last_key = np.int64(-1)
    last_slot = np.int64(-1)
    for k in range(points.shape[0]):
        x0, fx = _snap(points[k, 0] / voxel_size - 0.5)
        y0, fy = _snap(points[k, 1] / voxel_size - 0.5)
        z0, fz = _snap(points[k, 2] / voxel_size - 0.5)
        d = 0.0
        w = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        ok = True
        for corner in range(8):
            bxit = corner & 1
            byit = (corner >> 1) & 1
            bzit = (corner >> 2) & 1
            coeff = (fx if bxit else 1.0 - fx) * (fy if byit else 1.0 - fy) * (fz if bzit else 1.0 - fz)
            if coeff <= 0.0:
                continue
            ix = x0 + bxit
            iy = y0 + byit
            iz = z0 + bzit
            bx = ix // B
            by = iy // B
            bz = iz // B
            key = pack_index(bx, by, bz)
            if key != last_key:
                last_key = key
                last_slot = _find_slot(keys, slots, key)
            s = last_slot
            if s < 0:
                ok = False
                break
            lin = (ix - bx * B) + B * ((iy - by * B) + B * (iz - bz * B))
            wv = weight[s, lin]
            if wv <= 0.0:
                ok = False
                break
            d += coeff * dist[s, lin]
            w += coeff * wv
            c0 += coeff * color[s, lin, 0]
            c1 += coeff * color[s, lin, 1]
            c2 += coeff * color[s, lin, 2]
        valid[k] = ok
        if ok:
            out_d[k] = d
            out_w[k] = w
            out_c[k, 0] = np.uint8(min(255.0, max(0.0, np.rint(c0))))
            out_c[k, 1] = np.uint8(min(255.0, max(0.0, np.rint(c1))))
            out_c[k, 2] = np.uint8(min(255.0, max(0.0, np.rint(c2))))
        else:
            out_d[k] = 0.0
            out_w[k] = 0.0
            out_c[k, 0] = 0
            out_c[k, 1] = 0
            out_c[k, 2] = 0
