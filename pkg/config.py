import os
from dotenv import load_dotenv

load_dotenv()


def _optional_env(name: str):
    value = os.getenv(name, "").strip()
    return value or None


class Settings:
    # Output directory override (the only manifest value the environment may override)
    OUT_DIR = _optional_env("SHIFTEDIT_OUT_DIR")

    LOG_LEVEL = os.getenv("SHIFTEDIT_LOG_LEVEL", "INFO").upper()

    # Max concurrently executing edit runs inside one search grid
    MAX_PARALLEL_RUNS = max(1, int(os.getenv("SHIFTEDIT_MAX_PARALLEL_RUNS", "4")))

    # Chunk size for evaluation forward passes
    EVAL_BATCH_SIZE = max(1, int(os.getenv("SHIFTEDIT_EVAL_BATCH_SIZE", "256")))

    # Base training progress log interval (steps)
    TRAIN_LOG_EVERY = max(1, int(os.getenv("SHIFTEDIT_TRAIN_LOG_EVERY", "100")))

    # Service workspace (ledger is read from OUT_DIR or "runs")
    DATA_DIR = os.getenv("SHIFTEDIT_DATA_DIR", "runs/data")
    CHECKPOINT_PATH = os.getenv("SHIFTEDIT_CHECKPOINT_PATH", "runs/base.ckpt")
    SPLIT_SEED = int(os.getenv("SHIFTEDIT_SPLIT_SEED", "0"))
    SERVICE_TAUS = [
        float(t) for t in os.getenv("SHIFTEDIT_SERVICE_TAUS", "1.5,7.0").split(",") if t.strip()
    ]

    # API configuration
    API_TITLE = "shiftedit API"
    API_VERSION = "1.0.0"
    API_DESCRIPTION = """
    Model updates under distribution shift.

    Features:
    - Low-rank editing, surgical finetuning and full finetuning of a base classifier
    - Gated evaluation against the original validation set
    - Run ledger browsing
    """

    # CORS settings (read from env for production, fallback to dev defaults)
    CORS_ORIGINS = [
        o.strip()
        for o in os.getenv("SHIFTEDIT_CORS_ORIGINS", "http://localhost:3000,http://localhost:8080").split(",")
        if o.strip()
    ]

    # Pagination defaults
    DEFAULT_PAGE_SIZE = 20
    MAX_PAGE_SIZE = 100

    def resolve_out_dir(self, flag_value=None, manifest_value=None) -> str:
        """--out flag > SHIFTEDIT_OUT_DIR > manifest run.out_dir."""
        return flag_value or self.OUT_DIR or manifest_value or "runs"


settings = Settings()
