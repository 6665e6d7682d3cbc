import os
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Project root directory
ROOT_DIR = Path(__file__).parent.parent.parent

RUNS_PREFIX = "runs"


def gcs_config() -> Dict[str, Optional[str]]:
    """Artifact bucket settings, read from the environment at call time."""
    creds = os.getenv("GOOGLE_APPLICATION_CREDENTIALS", "gcs-credentials.json")
    if not os.path.isabs(creds):
        creds = str(ROOT_DIR / creds)
    return {
        "project_id": os.getenv("GCS_PROJECT_ID"),
        "bucket_name": os.getenv("GCS_BUCKET_NAME"),
        "credentials_path": creds,
    }


def validate_gcs_config(config: Optional[Dict[str, Optional[str]]] = None) -> Dict[str, Optional[str]]:
    """Validate GCS configuration"""
    config = config or gcs_config()
    missing = []
    if not config["project_id"]:
        missing.append("GCS_PROJECT_ID")
    if not config["bucket_name"]:
        missing.append("GCS_BUCKET_NAME")
    if not Path(config["credentials_path"]).exists():
        missing.append("Service Account Credentials File")

    if missing:
        raise ValueError(f"Missing required GCS configuration: {', '.join(missing)}")
    return config
