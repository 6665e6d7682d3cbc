import os
from dotenv import load_dotenv

load_dotenv()


class Settings:
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    ARTIFACT_DIR: str = os.getenv("ARTIFACT_DIR", "artifacts")
    NUM_WORKERS: int = int(os.getenv("NUM_WORKERS", "1"))
    GCS_PROJECT_ID: str = os.getenv("GCS_PROJECT_ID")
    GCS_BUCKET_NAME: str = os.getenv("GCS_BUCKET_NAME")
    GOOGLE_APPLICATION_CREDENTIALS: str = os.getenv("GOOGLE_APPLICATION_CREDENTIALS")


settings = Settings()
