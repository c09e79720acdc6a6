"""Independent reference implementations used as test oracles.

Everything here is written from the definitions in plain Python loops (or
the plainest numpy), sharing no code with the package.
"""
import math

MASK = (1 << 64) - 1


def matmul(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def layer_norm(row, gain, bias, eps=1e-5):
    d = len(row)
    mu = sum(row) / d
    var = sum((x - mu) ** 2 for x in row) / d
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)]


def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def _splitmix(z):
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & MASK
    return h


def hash_vector(word: str, seed: int, d: int):
    """Unit vector for ``word``: FNV-1a key, splitmix expansion to ``d``
    uniforms on [-1, 1), then L2 normalization."""
    state = _splitmix(fnv1a(word.encode("utf-8")) ^ (seed & MASK))
    raw = []
    for j in range(1, d + 1):
        z = _splitmix((state + j * 0x9E3779B97F4A7C15) & MASK)
        raw.append(2.0 * ((z >> 11) * 2.0 ** -53) - 1.0)
    n = math.sqrt(sum(v * v for v in raw))
    return [v / n for v in raw]


def decoder_forward(cells, query, layers, w_out, b_out, eps=1e-5):
    """Step-by-step pre-norm cross-attention decoder for a single query.

    ``layers`` holds dicts of nested lists with keys wq..ln2_b.
    """
    d = len(query)
    h = list(query)
    for L in layers:
        z = layer_norm(h, L["ln1_g"], L["ln1_b"], eps)
        q = matmul([z], L["wq"])[0]
        keys = matmul(cells, L["wk"])
        vals = matmul(cells, L["wv"])
        att = softmax([sum(qi * ki for qi, ki in zip(q, k)) / math.sqrt(d) for k in keys])
        ctx = [sum(a * v[j] for a, v in zip(att, vals)) for j in range(d)]
        o = matmul([ctx], L["wo"])[0]
        h = [a + b for a, b in zip(h, o)]
        z = layer_norm(h, L["ln2_g"], L["ln2_b"], eps)
        f = [gelu(v) for v in matmul([z], L["w1"])[0]]
        o = matmul([f], L["w2"])[0]
        h = [a + b for a, b in zip(h, o)]
    return sum(a * b for a, b in zip(h, w_out)) + b_out


def average_precision(scores, labels):
    """(1/P) * sum of precision@k over the ranks k holding a positive.

    Ranking: descending score, ties by ascending index. Exact rational
    arithmetic is avoided on purpose; the sum is taken in rank order.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    P = sum(1 for y in labels if y)
    if P == 0:
        return None
    hits, total = 0, 0.0
    for k, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            total += hits / k
    return total / P


def prf(scores, labels, t):
    tp = fp = fn = 0
    for s, y in zip(scores, labels):
        if s > t and y:
            tp += 1
        elif s > t:
            fp += 1
        elif y:
            fn += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def histogram(scores, nbins=64):
    out = [0] * nbins
    for s in scores:
        out[min(int(math.floor(s * nbins)), nbins - 1)] += 1
    return out


def asl_term(p, y, gp, gn, m):
    if y:
        return (1 - p) ** gp * -math.log(p)
    pm = max(p - m, 0.0)
    return pm ** gn * -math.log(1 - pm)


def contrastive(sim):
    """Symmetric in-batch cross entropy from explicit sums."""
    B = len(sim)
    row = col = 0.0
    for i in range(B):
        row += -(sim[i][i] - math.log(sum(math.exp(sim[i][j]) for j in range(B))))
        col += -(sim[i][i] - math.log(sum(math.exp(sim[j][i]) for j in range(B))))
    return 0.5 * (row / B + col / B)
