import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from src.config.storage_config import RUNS_PREFIX
from src.core.storage import CloudStorage
from src.utils.helpers import to_jsonable

logger = logging.getLogger(__name__)


def default_run_name(kind: str) -> str:
    return f"{kind}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"


class StorageService:
    def __init__(self, storage: Optional[CloudStorage] = None):
        self.storage = storage or CloudStorage()

    def publish_run(self, run_name: str, paths: Iterable[Union[str, Path]],
                    root: Optional[Union[str, Path]] = None) -> Dict[str, str]:
        """
        Upload local artifacts of one run under runs/<run_name>/, keeping
        their path relative to `root` when given.

        Returns:
            dict: local path -> gs:// URL, for every file that exists
        """
        uploaded = {}
        for path in paths:
            path = Path(path)
            if not path.is_file():
                logger.warning(f"Skipping missing artifact {path}")
                continue
            remote_name = path.relative_to(root).as_posix() if root else None
            uploaded[str(path)] = self.storage.upload_artifact(run_name, path, remote_name)
        logger.info(f"Published {len(uploaded)} artifacts for run {run_name}")
        return uploaded

    def store_report(self, run_name: str, report: dict, name: str = "report.json") -> str:
        try:
            payload = json.dumps(to_jsonable(report), indent=2, sort_keys=True)
            return self.storage.store_file(f"{RUNS_PREFIX}/{run_name}/{name}", payload, "application/json")
        except Exception as e:
            logger.error(f"Failed to store report for run {run_name}: {str(e)}")
            raise
