import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Callable, Dict, List, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .utils import SeedLike, spawn_seeds

logger = logging.getLogger(__name__)

# chunk_fn(first_index, seeds) -> array whose leading axis has len(seeds) entries
ChunkFn = Callable[[int, List[np.random.SeedSequence]], np.ndarray]


class ReplicationProcessor:
    """Runs independent Monte Carlo replications in chunks, sequentially or on a thread pool.

    Replication r always receives the r-th child stream of the seed, and chunks are
    reassembled in index order, so the output does not depend on the mode or on
    the number of workers.
    """

    def __init__(self, chunk_size: int = 100, desc: str = "Replications"):
        if chunk_size < 1:
            raise ValueError("The 'chunk_size' parameter must be a positive integer")
        self.chunk_size = chunk_size
        self.desc = desc
        self.timings: List[Dict[str, Any]] = []

    def _chunk_seeds(self, seed: SeedLike, total: int) -> List[Tuple[int, List[np.random.SeedSequence]]]:
        """Split replication seeds into chunks"""
        seeds = spawn_seeds(seed, total)
        return [(i, seeds[i:i + self.chunk_size]) for i in range(0, total, self.chunk_size)]

    def process_sequential(self, chunk_fn: ChunkFn, total: int, seed: SeedLike = None) -> np.ndarray:
        """Run all chunks in order"""
        logger.info(f"Starting sequential run of {total} replications (chunk size {self.chunk_size})")
        chunks = self._chunk_seeds(seed, total)
        results = []

        with tqdm(total=total, desc=self.desc) as pbar:
            for i, (first, seeds) in enumerate(chunks):
                logger.debug(f"Running chunk {i + 1}/{len(chunks)} with {len(seeds)} replications")
                start = pd.Timestamp.now()
                results.append(chunk_fn(first, seeds))
                self._record(i, len(seeds), start)
                pbar.update(len(seeds))

        return self._assemble(results)

    def process_parallel(self, chunk_fn: ChunkFn, total: int, seed: SeedLike = None,
                         workers: int = 4) -> np.ndarray:
        """Run chunks on a thread pool; numpy releases the GIL in the heavy kernels"""
        logger.info(f"Starting parallel run of {total} replications with {workers} workers "
                    f"(chunk size {self.chunk_size})")
        chunks = self._chunk_seeds(seed, total)
        results: Dict[int, np.ndarray] = {}

        with ThreadPoolExecutor(max_workers=workers) as executor:
            future_to_chunk = {
                executor.submit(self._timed, chunk_fn, i, first, seeds): (i, seeds)
                for i, (first, seeds) in enumerate(chunks)
            }

            with tqdm(total=total, desc=self.desc) as pbar:
                for future in as_completed(future_to_chunk):
                    chunk_index, seeds = future_to_chunk[future]
                    try:
                        results[chunk_index] = future.result()
                        logger.debug(f"Chunk {chunk_index + 1} completed: {len(seeds)} replications")
                        pbar.update(len(seeds))
                    except Exception as exc:
                        logger.error(f"Error in replication chunk {chunk_index + 1}: {exc}")
                        raise

        return self._assemble([results[i] for i in range(len(chunks))])

    def run(self, chunk_fn: ChunkFn, total: int, seed: SeedLike = None, workers: int = None,
            sequential: bool = False) -> np.ndarray:
        if sequential or workers == 1 or total <= self.chunk_size:
            return self.process_sequential(chunk_fn, total, seed)
        return self.process_parallel(chunk_fn, total, seed, workers or 4)

    def _timed(self, chunk_fn: ChunkFn, index: int, first: int, seeds) -> np.ndarray:
        start = pd.Timestamp.now()
        out = chunk_fn(first, seeds)
        self._record(index, len(seeds), start)
        return out

    def _record(self, index: int, size: int, start: pd.Timestamp) -> None:
        duration = (pd.Timestamp.now() - start).total_seconds()
        self.timings.append({"chunk": index, "replications": size, "seconds": duration})

    def timing_report(self) -> pd.DataFrame:
        """Per-chunk timings, logged as a final report"""
        df = pd.DataFrame(self.timings, columns=["chunk", "replications", "seconds"]).sort_values("chunk")
        total = int(df["replications"].sum()) if len(df) else 0
        seconds = float(df["seconds"].sum()) if len(df) else 0.0

        logger.info("=" * 50)
        logger.info("REPLICATION REPORT")
        logger.info("=" * 50)
        logger.info(f"Total replications: {total}")
        logger.info(f"Chunks: {len(df)}")
        if seconds > 0:
            logger.info(f"📊 Throughput: {total / seconds:.2f} replications/second (summed chunk time)")
        logger.info("=" * 50)
        return df.reset_index(drop=True)

    @staticmethod
    def _assemble(results: List[np.ndarray]) -> np.ndarray:
        if not results:
            raise ValueError("No replications were run")
        return np.concatenate(results, axis=0)
