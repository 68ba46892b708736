import numpy as np
import pytest

from reldet.core import BoxGeometry, Proposal


def random_box(rng: np.random.Generator, span: float = 500.0) -> BoxGeometry:
    cx = rng.uniform(60.0, span)
    cy = rng.uniform(60.0, span)
    w = rng.uniform(15.0, 120.0)
    h = rng.uniform(15.0, 120.0)
    return BoxGeometry(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def random_proposals(rng: np.random.Generator, count: int, d_model: int,
                     frame: int = 0, id_offset: int = 0,
                     nonnegative: bool = False) -> list[Proposal]:
    proposals = []
    for i in range(count):
        feature = rng.standard_normal(d_model)
        if nonnegative:
            feature = np.abs(feature)
        proposals.append(Proposal(
            id=id_offset + i,
            frame_index=frame,
            box=random_box(rng),
            feature=feature,
            objectness=float(rng.uniform(0.05, 1.0)),
        ))
    return proposals


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
