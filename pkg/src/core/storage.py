import logging
from pathlib import Path
from typing import Dict, Optional, Union

from google.cloud import storage
from google.oauth2 import service_account

from src.config.storage_config import RUNS_PREFIX, validate_gcs_config

logger = logging.getLogger(__name__)

CONTENT_TYPES = {
    ".json": "application/json",
    ".jsonl": "application/x-ndjson",
    ".txt": "text/plain",
    ".cfg": "text/plain",
}


def content_type_for(path: Union[str, Path]) -> str:
    return CONTENT_TYPES.get(Path(path).suffix, "application/octet-stream")


class CloudStorage:
    """Run artifacts in a Google Cloud Storage bucket."""

    def __init__(self, config: Optional[Dict[str, Optional[str]]] = None):
        try:
            config = validate_gcs_config(config)
            logger.info(f"Loading credentials from: {config['credentials_path']}")
            credentials = service_account.Credentials.from_service_account_file(
                config["credentials_path"],
                scopes=["https://www.googleapis.com/auth/cloud-platform"]
            )

            self.project_id = config["project_id"]
            self.bucket_name = config["bucket_name"]
            logger.info(f"Using project_id: {self.project_id}, bucket_name: {self.bucket_name}")

            self.client = storage.Client(credentials=credentials, project=self.project_id)
            try:
                self.bucket = self.client.get_bucket(self.bucket_name)
                logger.info(f"Connected to bucket: {self.bucket_name}")
            except Exception as e:
                logger.warning(f"Error accessing bucket ({str(e)}), trying to create it...")
                self.bucket = self.client.create_bucket(self.bucket_name, location="us-central1")
        except Exception as e:
            logger.error(f"Storage initialization failed: {str(e)}")
            raise RuntimeError(f"Failed to initialize GCS storage: {str(e)}")

    def url_for(self, remote_path: str) -> str:
        return f"gs://{self.bucket_name}/{remote_path}"

    def store_file(self, remote_path: str, content: Union[str, bytes], content_type: str = "application/octet-stream") -> str:
        """Store bytes (or UTF-8 text) at `remote_path` in the bucket."""
        try:
            content_bytes = content.encode("utf-8") if isinstance(content, str) else content
            if not content_bytes:
                logger.warning(f"Content is empty for file: {remote_path}")
            logger.info(f"Uploading {len(content_bytes)} bytes to {remote_path}")
            self.bucket.blob(remote_path).upload_from_string(content_bytes, content_type=content_type)
            url = self.url_for(remote_path)
            logger.info(f"Successfully stored file at: {url}")
            return url
        except Exception as e:
            logger.error(f"Failed to store file {remote_path}: {str(e)}")
            raise

    def upload_artifact(self, run_name: str, local_path: Union[str, Path], remote_name: Optional[str] = None) -> str:
        local_path = Path(local_path)
        if not local_path.exists():
            raise FileNotFoundError(f"Artifact not found at: {local_path}")
        remote_path = f"{RUNS_PREFIX}/{run_name}/{remote_name or local_path.name}"
        return self.store_file(remote_path, local_path.read_bytes(), content_type_for(local_path))
