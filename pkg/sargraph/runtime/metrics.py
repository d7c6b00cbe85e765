from pathlib import Path
from typing import List, Union
import logging
import threading

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class MetricsSink:
    """Thread-safe collector of metric rows, written out as CSV"""

    def __init__(self):
        self._lock = threading.Lock()
        self._rows: List[BaseModel] = []

    def add(self, row: BaseModel) -> None:
        with self._lock:
            self._rows.append(row)

    def rows(self) -> List[BaseModel]:
        with self._lock:
            return list(self._rows)

    def __len__(self) -> int:
        return len(self._rows)

    def frame(self) -> pd.DataFrame:
        rows = self.rows()
        if not rows:
            return pd.DataFrame()
        df = pd.DataFrame([row.model_dump(mode='json') for row in rows])
        if "epoch" in df.columns:
            df = df.sort_values(["epoch", "worker"], kind="stable").reset_index(drop=True)
        return df

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False)
        logger.info(f"Wrote {len(self)} metric rows to {path}")
        return path
