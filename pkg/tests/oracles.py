"""Independent brute-force references for the ranking and classification metrics.

Plain-python loops over every pair (or every item), written without
reference to the vectorised implementations they check.
"""
import math


def kendall_tau_b(model, human):
    n = len(model)
    conc = disc = tie_m = tie_h = 0
    for i in range(n):
        for j in range(i + 1, n):
            dm = (model[i] > model[j]) - (model[i] < model[j])
            dh = (human[i] > human[j]) - (human[i] < human[j])
            if dm == 0:
                tie_m += 1
            if dh == 0:
                tie_h += 1
            if dm * dh > 0:
                conc += 1
            elif dm * dh < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tie_m) * (n0 - tie_h))


def pairwise_accuracy(model, human):
    credit, total = 0.0, 0
    for i in range(len(model)):
        for j in range(i + 1, len(model)):
            if human[i] == human[j]:
                continue
            total += 1
            if model[i] == model[j]:
                credit += 0.5
            elif (model[i] > model[j]) == (human[i] > human[j]):
                credit += 1.0
    return credit / total


def pearson(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def f1(predictions, labels):
    table = {(p, y): 0 for p in (True, False) for y in (True, False)}
    for p, y in zip(predictions, labels):
        table[(bool(p), bool(y))] += 1
    tp, fp, fn = table[(True, True)], table[(True, False)], table[(False, True)]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def random_instance(rng, n_max=50, discrete=True):
    """Random scored list; discrete scores so ties appear on both sides."""
    n = int(rng.integers(2, n_max + 1))
    while True:
        if discrete:
            model = rng.integers(0, 6, n).astype(float).tolist()
            human = rng.integers(0, 5, n).astype(float).tolist()
        else:
            model = rng.normal(size=n).tolist()
            human = rng.normal(size=n).tolist()
        if len(set(model)) > 1 and len(set(human)) > 1:
            return model, human
