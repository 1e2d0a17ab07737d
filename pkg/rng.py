"""Counter-based random streams for reproducible simulation.

Every random draw of a run comes from a stream keyed by
(master seed, purpose, round, party).  Streams are independent of the order
in which they are requested, so client updates can run in any order or in
parallel and still reproduce bit for bit.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    INIT = 0
    PRETRAIN = 1
    SAMPLING = 2
    CLIENT = 3
    SERVER = 4


class StreamFactory:
    """Derives child generators from one master seed."""

    def __init__(self, master_seed: int):
        self._seed = int(master_seed)

    @property
    def seed(self) -> int:
        return self._seed

    def stream(self, purpose: Purpose, round_index: int = 0, party: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self._seed,
            spawn_key=(int(purpose), int(round_index), int(party)),
        )
        return np.random.default_rng(seq)

    def init(self) -> np.random.Generator:
        return self.stream(Purpose.INIT)

    def pretrain(self) -> np.random.Generator:
        return self.stream(Purpose.PRETRAIN)

    def sampling(self, round_index: int) -> np.random.Generator:
        return self.stream(Purpose.SAMPLING, round_index)

    def client(self, round_index: int, client: int) -> np.random.Generator:
        return self.stream(Purpose.CLIENT, round_index, client)

    def server(self, round_index: int) -> np.random.Generator:
        return self.stream(Purpose.SERVER, round_index)

    def fork(self, offset: int) -> "StreamFactory":
        """Factory for an independent replica (e.g. Monte-Carlo resampling)."""
        return StreamFactory(int(np.random.SeedSequence([self._seed, offset]).generate_state(1)[0]))
