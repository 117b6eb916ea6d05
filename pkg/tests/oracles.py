"""Loop-based reference computations, kept independent of the numpy code
paths they check."""

import math
import statistics


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def softmax(row):
    m = max(row)
    ex = [math.exp(v - m) for v in row]
    s = sum(ex)
    return [v / s for v in ex]


def attention_head(q, k, v):
    d = len(q[0])
    out = []
    for qi in q:
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k]
        w = softmax(logits)
        out.append([sum(w[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return out


def attention(q, k, v):
    """Heads-first nested lists in, (tokens x heads*head_dim) lists out."""
    per_head = [attention_head(q[h], k[h], v[h]) for h in range(len(q))]
    tokens = len(q[0])
    return [[x for h in range(len(q)) for x in per_head[h][t]] for t in range(tokens)]


def adain(content, style, eps):
    """Channel-wise over tokens, population std, floor guard."""
    out = [[0.0] * len(content[0]) for _ in content]
    for c in range(len(content[0])):
        col_c = [row[c] for row in content]
        col_s = [row[c] for row in style]
        mu_c, sd_c = statistics.fmean(col_c), statistics.pstdev(col_c)
        mu_s, sd_s = statistics.fmean(col_s), statistics.pstdev(col_s)
        for t, x in enumerate(col_c):
            out[t][c] = sd_s * (x - mu_c) / max(sd_c, eps) + mu_s
    return out


def merge(x):
    """(heads, tokens, hd) -> (tokens, heads*hd)."""
    return [[x[h][t][j] for h in range(len(x)) for j in range(len(x[0][0]))] for t in range(len(x[0]))]


def split(x, heads):
    hd = len(x[0]) // heads
    return [[row[h * hd : (h + 1) * hd] for row in x] for h in range(heads)]


def layer_norm(x, eps):
    out = []
    for row in x:
        mu = statistics.fmean(row)
        var = statistics.fmean([(v - mu) ** 2 for v in row])
        out.append([(v - mu) / math.sqrt(var + eps) for v in row])
    return out


def ffa_transcript(f_res, cq, ck, cv, sk, sv, alpha, beta, w_q, heads, norm_eps=None, eps_guard=1e-5):
    """Feature fusion attention written out one algorithm line at a time."""
    # line 2: query of the current residual features via the block's projection
    phi = layer_norm(f_res, norm_eps) if norm_eps is not None else f_res
    q_cs = split(matmul(phi, w_q), heads)
    # line 3: blended query
    q = [[[alpha * cq[h][t][j] + beta * q_cs[h][t][j] for j in range(len(cq[0][0]))]
          for t in range(len(cq[0]))] for h in range(heads)]
    # line 4: keys concatenated along tokens
    k = [ck[h] + sk[h] for h in range(heads)]
    # line 5: AdaIN-fused content values, then style values
    fused = split(adain(merge(cv), merge(sv), eps_guard), heads)
    v = [fused[h] + sv[h] for h in range(heads)]
    # line 6: attention plus residual
    att = attention(q, k, v)
    return [[a + r for a, r in zip(ar, rr)] for ar, rr in zip(att, f_res)]
