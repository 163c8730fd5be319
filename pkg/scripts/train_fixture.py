"""Train the tiny-test-cnn fixture on synthetic-2class and save its weights.

    python3 scripts/train_fixture.py [--out src/profiling_agent/data/tiny_cnn_2class.pt]
"""
import argparse
import logging

import torch
import torch.nn.functional as F

from profiling_agent.fixtures import TWO_CLASS_LABELS, SyntheticDataset, TinyCNN

logger = logging.getLogger("train_fixture")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="src/profiling_agent/data/tiny_cnn_2class.pt")
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)

    torch.manual_seed(0)
    model = TinyCNN(len(TWO_CLASS_LABELS))
    ds = SyntheticDataset("synthetic-2class")
    x, y = ds.images, ds.targets
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    for epoch in range(args.epochs):
        opt.zero_grad()
        loss = F.cross_entropy(model(x), y)
        loss.backward()
        opt.step()
        acc = (model(x).argmax(1) == y).float().mean().item()
        if epoch % 20 == 0 or acc == 1.0:
            logger.info("epoch %d loss %.4f acc %.3f", epoch, loss.item(), acc)
        if acc == 1.0 and loss.item() < 0.05:
            break
    torch.save(model.state_dict(), args.out)
    logger.info("saved %s", args.out)


if __name__ == "__main__":
    main()
