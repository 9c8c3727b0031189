"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def sorted_knn_distances(queries, index, kmax):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.float64)
    out = np.empty((queries.shape[0], kmax))
    # row blocks bound the temporary (block, n, d) difference tensor
    block = max(1, 2_000_000 // max(1, index.size))
    for start in range(0, queries.shape[0], block):
        diff = queries[start:start + block, None, :] - index[None, :, :]
        dist = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
        if kmax < dist.shape[1]:
            dist = np.partition(dist, kmax - 1, axis=1)[:, :kmax]
        out[start:start + block] = np.sort(dist, axis=1)
    return out


def average_ranks(values):
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = values.shape[0]
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # boundaries of tie runs in sorted order
    new_run = np.empty(n, dtype=bool)
    if n:
        new_run[0] = True
        new_run[1:] = sorted_vals[1:] != sorted_vals[:-1]
    starts = np.flatnonzero(new_run)
    ends = np.append(starts[1:], n) - 1
    run_rank = 0.5 * (starts + ends) + 1.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(run_rank, ends - starts + 1)
    return ranks
