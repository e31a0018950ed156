"""
Configuration management for the opsat pipeline
Handles environment variables, data-root resolution, and runtime settings
"""

import os
from pathlib import Path
from typing import Dict, Any, Optional
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

PROJECT_ROOT = Path(__file__).resolve().parents[1]
DEFAULT_FILTER_CONFIG = PROJECT_ROOT / "data" / "cloud-filter.json"
DEFAULT_WEIGHTS_MANIFEST = PROJECT_ROOT / "data" / "external-weights-manifest.json"

VALID_DEVICES = ['cpu', 'cuda', 'mps']
VALID_LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']


class Config:
    """Configuration manager for opsat runs"""

    def __init__(self):
        self.load_config()

    def load_config(self):
        """Load configuration from environment variables"""

        # Data locations
        self.DATA_ROOT = os.getenv('OPSAT_DATA_ROOT') or None
        self.OUT_DIR = os.getenv('OPSAT_OUT_DIR', str(PROJECT_ROOT / 'runs'))
        self.FILTER_CONFIG = os.getenv('OPSAT_FILTER_CONFIG', str(DEFAULT_FILTER_CONFIG))
        self.WEIGHTS_MANIFEST = os.getenv('OPSAT_WEIGHTS_MANIFEST', str(DEFAULT_WEIGHTS_MANIFEST))

        # ImageNet weights: a local archive skips the download
        self.IMAGENET_WEIGHTS = os.getenv('OPSAT_IMAGENET_WEIGHTS') or None

        # Compute settings
        self.DEVICE = os.getenv('OPSAT_DEVICE', 'cpu').lower()
        self.NUM_WORKERS = int(os.getenv('OPSAT_NUM_WORKERS', '0'))
        self.FEATURE_BATCH_SIZE = int(os.getenv('OPSAT_FEATURE_BATCH_SIZE', '16'))

        # Tool settings
        self.LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
        self.RUN_SLOW_TESTS = os.getenv('OPSAT_RUN_SLOW', '0') == '1'

    def validate_config(self) -> Dict[str, Any]:
        """Validate configuration and return status"""
        errors = []
        warnings = []

        if self.DEVICE not in VALID_DEVICES:
            errors.append(f"Invalid OPSAT_DEVICE: {self.DEVICE}")
        if self.LOG_LEVEL not in VALID_LOG_LEVELS:
            errors.append(f"Invalid LOG_LEVEL: {self.LOG_LEVEL}")
        if self.NUM_WORKERS < 0:
            errors.append("OPSAT_NUM_WORKERS must be zero or positive")
        if self.FEATURE_BATCH_SIZE < 1:
            errors.append("OPSAT_FEATURE_BATCH_SIZE must be positive")

        if self.DATA_ROOT and not Path(self.DATA_ROOT).is_dir():
            errors.append(f"OPSAT_DATA_ROOT does not exist: {self.DATA_ROOT}")
        if not Path(self.FILTER_CONFIG).is_file():
            errors.append(f"Cloud filter config not found: {self.FILTER_CONFIG}")

        if self.IMAGENET_WEIGHTS and not Path(self.IMAGENET_WEIGHTS).is_file():
            errors.append(f"OPSAT_IMAGENET_WEIGHTS not found: {self.IMAGENET_WEIGHTS}")
        elif not self.IMAGENET_WEIGHTS:
            warnings.append("ImageNet weights will be downloaded on first use")

        return {
            'valid': len(errors) == 0,
            'errors': errors,
            'warnings': warnings
        }

    def resolve_data_path(self, path: Optional[str], base: Optional[Path] = None) -> Optional[Path]:
        """Resolve a data path against OPSAT_DATA_ROOT, else against base"""
        if path is None:
            return None
        candidate = Path(path).expanduser()
        if candidate.is_absolute():
            return candidate
        if self.DATA_ROOT:
            return Path(self.DATA_ROOT) / candidate
        if base is not None:
            return base / candidate
        return candidate.resolve()

    def get(self, key: str, default=None):
        """Get configuration value by key"""
        key_upper = key.upper()
        return getattr(self, key_upper, default)

    def set(self, key: str, value):
        """Set configuration value"""
        key_upper = key.upper()
        setattr(self, key_upper, value)

    def get_all_settings(self) -> Dict[str, Any]:
        """Get all configuration settings"""
        return {
            'data_root': self.DATA_ROOT,
            'out_dir': self.OUT_DIR,
            'filter_config': self.FILTER_CONFIG,
            'weights_manifest': self.WEIGHTS_MANIFEST,
            'imagenet_weights': self.IMAGENET_WEIGHTS,
            'device': self.DEVICE,
            'num_workers': self.NUM_WORKERS,
            'feature_batch_size': self.FEATURE_BATCH_SIZE,
            'log_level': self.LOG_LEVEL,
        }

    def print_config_summary(self):
        """Print a summary of current configuration"""
        print("🔧 opsat Configuration")
        print("=" * 40)
        print(f"Data root: {self.DATA_ROOT or 'config-relative'}")
        print(f"Output dir: {self.OUT_DIR}")
        print(f"Filter config: {self.FILTER_CONFIG}")
        print(f"ImageNet weights: {self.IMAGENET_WEIGHTS or 'torchvision download'}")
        print(f"Device: {self.DEVICE}")
        print(f"Workers: {self.NUM_WORKERS}")
        print()

        validation = self.validate_config()
        if validation['valid']:
            print("✅ Configuration is valid")
        else:
            print("❌ Configuration has errors:")
            for error in validation['errors']:
                print(f"  - {error}")

        if validation['warnings']:
            print("⚠️  Warnings:")
            for warning in validation['warnings']:
                print(f"  - {warning}")


# Global configuration instance
config = Config()


if __name__ == "__main__":
    config.print_config_summary()
