"""
Utility functions for the pain intensity pipeline
"""
import os
import json
import logging
from typing import List, Dict, Any
from datetime import datetime

import numpy as np
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

_LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(name: str = __name__) -> logging.Logger:
    """Setup logging configuration"""
    root = logging.getLogger()
    if not root.handlers:
        handlers: List[logging.Handler] = [logging.StreamHandler()]
        log_file = os.getenv('PAIN_LOG_FILE', 'pain_pipeline.log')
        if log_file:
            handlers.append(logging.FileHandler(log_file))
        logging.basicConfig(
            level=os.getenv('PAIN_LOG_LEVEL', 'INFO').upper(),
            format=_LOG_FORMAT,
            handlers=handlers
        )
    return logging.getLogger(name)


def _env_bool(key: str, default: str = 'false') -> bool:
    return os.getenv(key, default).strip().lower() in ('1', 'true', 'yes', 'on')


def get_config() -> Dict[str, Any]:
    """Get configuration from environment variables"""
    return {
        'output_dir': os.getenv('PAIN_OUTPUT_DIR', 'runs'),
        'seed': int(os.getenv('PAIN_SEED', '0')),
        'max_pspi': int(os.getenv('PAIN_MAX_PSPI', '16')),
        'hidden_size': int(os.getenv('PAIN_HIDDEN_SIZE', '128')),
        'head_units': int(os.getenv('PAIN_HEAD_UNITS', '64')),
        'epochs': int(os.getenv('PAIN_EPOCHS', '30')),
        'batch_size': int(os.getenv('PAIN_BATCH_SIZE', '32')),
        'learning_rate': float(os.getenv('PAIN_LEARNING_RATE', '1e-3')),
        'hcrf_lambda': float(os.getenv('PAIN_HCRF_LAMBDA', '1.0')),
        'hcrf_states': int(os.getenv('PAIN_HCRF_STATES', '11')),
        'lbfgs_max_iter': int(os.getenv('PAIN_LBFGS_MAX_ITER', '200')),
        'variance_target': float(os.getenv('PAIN_VARIANCE_TARGET', '0.95')),
        'show_progress': _env_bool('PAIN_SHOW_PROGRESS'),
    }


def validate_config(config: Dict[str, Any]) -> bool:
    """Validate configuration"""
    logger = setup_logging(__name__)
    ok = True
    if config['max_pspi'] not in (15, 16):
        logger.error(f"PAIN_MAX_PSPI must be 15 or 16, got {config['max_pspi']}")
        ok = False
    for key in ('hidden_size', 'head_units', 'epochs', 'batch_size', 'hcrf_states', 'lbfgs_max_iter'):
        if config[key] < 1:
            logger.error(f"{key} must be positive, got {config[key]}")
            ok = False
    if config['learning_rate'] < 0:
        logger.error(f"learning_rate must be non-negative, got {config['learning_rate']}")
        ok = False
    if config['hcrf_lambda'] < 0:
        logger.error(f"hcrf_lambda must be non-negative, got {config['hcrf_lambda']}")
        ok = False
    if not 0 < config['variance_target'] <= 1:
        logger.error(f"variance_target must lie in (0, 1], got {config['variance_target']}")
        ok = False
    return ok


def save_data(data: Any, filename: str):
    """Save data to JSON file"""
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2)


def load_data(filename: str) -> Any:
    """Load data from JSON file"""
    with open(filename, 'r', encoding='utf-8') as f:
        return json.load(f)


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    """Shape-tagged flat representation of an array, safe for JSON"""
    array = np.asarray(array, dtype=float)
    return {'shape': list(array.shape), 'data': array.ravel().tolist()}


def decode_array(payload: Dict[str, Any]) -> np.ndarray:
    return np.asarray(payload['data'], dtype=float).reshape(payload['shape'])


def format_timestamp() -> str:
    """Get formatted timestamp"""
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")
