import time
from dataclasses import dataclass

import numpy as np
import pytest

from phonemeldm.config import LdmConfig, VaeConfig
from phonemeldm.ldm import LatentDiffusion, train_ldm
from phonemeldm.pvae import PhonemeVAE, encode_means, train_vae
from phonemeldm.schedules import linear_beta_schedule
from phonemeldm.synthdata import Dataset, gen_corpus


@dataclass
class TrainedToy:
    ds: Dataset
    vae: PhonemeVAE
    model: LatentDiffusion
    mus: list[np.ndarray]
    vae_rows: list[dict]
    ldm_rows: list[dict]
    seconds: float


@pytest.fixture(scope="session")
def trained_toy() -> TrainedToy:
    """Default-config toy run: 8 speakers x 20 utterances, seed 0."""
    t0 = time.perf_counter()
    ds = gen_corpus(0, 8, 20)
    vae, _, vae_rows = train_vae(ds, VaeConfig(), 0)
    mus = encode_means(vae, ds)
    model, ldm_rows = train_ldm(ds, mus, LdmConfig(), linear_beta_schedule(), 0, VaeConfig().d_z)
    return TrainedToy(ds, vae, model, mus, vae_rows, ldm_rows, time.perf_counter() - t0)


@pytest.fixture()
def report(capsys):
    """Print one line to the terminal even when output is captured."""
    def emit(line: str) -> None:
        with capsys.disabled():
            print(f"\n{line}")
    return emit
