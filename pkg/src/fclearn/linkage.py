"""Family-of-subsets (FOS) linkage models.

The linkage tree agglomerates gene positions by UPGMA (average linkage) on
pairwise mutual information; every cluster formed along the way except the
root becomes a FOS subset.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FOS:
    subsets: tuple
    kind: str
    # (left cluster, right cluster, similarity) per merge, for debug dumps
    merges: tuple = ()

    def __len__(self):
        return len(self.subsets)

    def __iter__(self):
        return iter(self.subsets)

    def __getitem__(self, i):
        return self.subsets[i]

    def to_json(self):
        return {
            "kind": self.kind,
            "subsets": [list(map(int, s)) for s in self.subsets],
            "merges": [
                {"left": list(map(int, a)), "right": list(map(int, b)), "mi": float(s)}
                for a, b, s in self.merges
            ],
        }


def univariate_fos(n_positions):
    return FOS(tuple((i,) for i in range(n_positions)), "univariate")


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def pairwise_mi(genotypes, i, j):
    """Empirical mutual information (nats) between columns ``i`` and ``j``."""
    g = np.asarray(genotypes)
    a = np.unique(g[:, i], return_inverse=True)[1].ravel()
    b = np.unique(g[:, j], return_inverse=True)[1].ravel()
    n = len(a)
    nb = b.max() + 1
    joint = np.bincount(a * nb + b)
    mi = _entropy(np.bincount(a), n) + _entropy(np.bincount(b), n) - _entropy(joint, n)
    return max(mi, 0.0)


def mi_matrix(genotypes):
    """Symmetric ``L x L`` matrix of pairwise mutual information."""
    g = np.asarray(genotypes)
    n, L = g.shape
    codes = np.empty_like(g, dtype=np.int64)
    card = np.empty(L, dtype=np.int64)
    h = np.empty(L)
    for k in range(L):
        _, inv = np.unique(g[:, k], return_inverse=True)
        codes[:, k] = inv.ravel()
        card[k] = codes[:, k].max() + 1
        h[k] = _entropy(np.bincount(codes[:, k]), n)
    mi = np.zeros((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            joint = np.bincount(codes[:, i] * card[j] + codes[:, j])
            mi[i, j] = mi[j, i] = max(h[i] + h[j] - _entropy(joint, n), 0.0)
    return mi


def upgma(similarity):
    """Average-linkage agglomeration on a similarity matrix.

    Returns the FOS with all leaves followed by every merged cluster except the
    root. Ties go to the pair whose (first, second) smallest member positions
    are lowest.
    """
    S = np.asarray(similarity, dtype=float)
    L = S.shape[0]
    leaves = [(i,) for i in range(L)]
    if L < 2:
        return FOS(tuple(leaves), "linkage_tree")
    clusters = [(i,) for i in range(L)]
    sim = S.copy()
    subsets = list(leaves)
    merges = []
    while len(clusters) > 2:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                s = sim[a, b]
                if best is None or s > best[0]:
                    best = (s, a, b)
        s, a, b = best
        merged = tuple(sorted(clusters[a] + clusters[b]))
        merges.append((clusters[a], clusters[b], s))
        na, nb = len(clusters[a]), len(clusters[b])
        row = (na * sim[a] + nb * sim[b]) / (na + nb)
        keep = [k for k in range(len(clusters)) if k not in (a, b)]
        new_sim = np.empty((len(keep) + 1, len(keep) + 1))
        new_sim[:-1, :-1] = sim[np.ix_(keep, keep)]
        new_sim[-1, :-1] = new_sim[:-1, -1] = row[keep]
        new_sim[-1, -1] = 0.0
        clusters = [clusters[k] for k in keep] + [merged]
        # keep clusters ordered by smallest member so ties resolve by position
        order = sorted(range(len(clusters)), key=lambda k: clusters[k][0])
        clusters = [clusters[k] for k in order]
        sim = new_sim[np.ix_(order, order)]
        subsets.append(merged)
    merges.append((clusters[0], clusters[1], sim[0, 1]))
    return FOS(tuple(subsets), "linkage_tree", tuple(merges))


def learn_linkage_tree(genotypes):
    """Linkage tree over the columns of a ``(population, L)`` symbol matrix."""
    g = np.asarray(genotypes)
    if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] < 2:
        raise ValueError("need at least 2 genotypes of length >= 2")
    return upgma(mi_matrix(g))


def gaussian_linkage_tree(samples):
    """Linkage tree for real-valued samples, using Gaussian MI ``-0.5 ln(1 - rho^2)``."""
    x = np.asarray(samples, dtype=float)
    with np.errstate(all="ignore"):
        rho = np.corrcoef(x, rowvar=False)
    rho = np.nan_to_num(np.atleast_2d(rho))
    rho2 = np.clip(rho ** 2, 0.0, 1.0 - 1e-12)
    return upgma(-0.5 * np.log1p(-rho2))
