import torch


def unit_images(n, seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=g)


def linear_probe_accuracy(features, labels, k, seed=0):
    """Held-out accuracy of a softmax-linear model fit on half the samples."""
    g = torch.Generator().manual_seed(seed)
    n = len(labels)
    perm = torch.randperm(n, generator=g)
    tr, te = perm[: n // 2], perm[n // 2:]
    x = torch.from_numpy(features.reshape(n, -1)).float()
    x = x / x.std()
    y = torch.from_numpy(labels)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        lin = torch.nn.Linear(x.shape[1], k)
    opt = torch.optim.Adam(lin.parameters(), lr=1e-2)
    for _ in range(300):
        loss = torch.nn.functional.cross_entropy(lin(x[tr]), y[tr])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        return float((lin(x[te]).argmax(1) == y[te]).float().mean())
