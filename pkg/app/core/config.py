from pathlib import Path

from pydantic_settings import BaseSettings

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


class Settings(BaseSettings):
    APP_NAME: str = "twister-sim"
    ENV: str = "dev"
    LOG_LEVEL: str = "WARNING"
    # Registry chain
    USERREG_DIFFICULTY: int = 12
    GENESIS_DIFFICULTY: int = 8
    INITIAL_BLOCK_DIFFICULTY: int = 16
    BLOCK_TARGET_TICKS: int = 600  # 1 tick = 1 simulated second
    RETARGET_INTERVAL: int = 36
    MAX_RETARGET_STEP: int = 2
    CONFIRMATION_DEPTH: int = 6
    SPAM_MAX_CHARS: int = 140
    USERNAME_MAX_LEN: int = 16
    DISPLAY_PROBABILITY: float = 1 / 6
    LOCALE_WEIGHT: int = 3
    PROMOTED_WINDOW: int = 36
    # DHT overlay
    DHT_K: int = 8
    DHT_ALPHA: int = 3
    DHT_R: int = 3
    MAX_HOPS: int = 16
    MULTI_CAP: int = 32
    STORE_CAP: int = 4096
    STORE_TTL: int = 86400
    STORE_MAINTENANCE_TICKS: int = 600
    CLOCK_SKEW: int = 120
    MAX_IDS_PER_IP: int = 8
    # Swarms
    FANOUT: int = 8
    RECENT_WINDOW: int = 64
    RETRY_TICKS: int = 30
    RATE_BASE: int = 20
    RATE_PER_BLOCK: int = 2
    # Microblog
    POST_MAX_CHARS: int = 140
    MIN_WORD_LEN: int = 4
    WORDS_PER_POST: int = 16
    STOPWORDS_PATH: Path = DATA_DIR / "stopwords.yaml"
    # Simulation
    SIM_LATENCY_MIN: int = 1
    SIM_LATENCY_MAX: int = 3
    SIM_MAX_TICKS: int = 10_000_000
    SIM_MAX_EVENTS: int = 2_000_000
    DEFAULT_HASHRATE: int = 1

    class Config:
        env_file = ".env"


settings = Settings()
