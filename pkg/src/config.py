"""
Load and manage Core QUIC configuration from YAML file
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

# Load environment variables if .env file exists
try:
    from dotenv import load_dotenv

    env_path = Path(__file__).parent.parent / '.env'
    if env_path.exists():
        load_dotenv(env_path)
    elif Path('.env').exists():
        load_dotenv('.env')

except ImportError:
    pass  # No dotenv available, use system env vars

PROJECT_ROOT = Path(__file__).parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "cquic_config.yaml"


class CoreQuicConfig:
    """Load and manage engine, transport and experiment settings from YAML file"""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = Path(config_path or os.getenv('CQUIC_CONFIG') or DEFAULT_CONFIG_PATH)
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file"""
        if not self.config_path.exists():
            raise FileNotFoundError(f"Config file not found: {self.config_path}")

        with open(self.config_path, 'r') as f:
            return yaml.safe_load(f)

    @property
    def engine(self) -> Dict[str, Any]:
        """Get plugin engine limits"""
        return self.config['engine']

    @property
    def transport(self) -> Dict[str, Any]:
        """Get transport defaults (mtu, flow control, acks)"""
        return self.config['transport']

    @property
    def recovery(self) -> Dict[str, Any]:
        """Get congestion control and loss detection constants"""
        return self.config['recovery']

    @property
    def link(self) -> Dict[str, Any]:
        """Get default link model"""
        return self.config['link']

    @property
    def plugins(self) -> Dict[str, Any]:
        """Get per-plugin settings"""
        return self.config['plugins']

    @property
    def permission_profiles(self) -> Dict[str, List[str]]:
        """Get named permission grant lists"""
        return self.config['permission_profiles']

    @property
    def host_profiles(self) -> Dict[str, Any]:
        """Get named field subsets a host may expose"""
        return self.config['host_profiles']

    @property
    def experiments(self) -> Dict[str, Any]:
        """Get experiment suite settings"""
        return self.config['experiments']

    @property
    def benchmarks(self) -> Dict[str, Any]:
        """Get micro-benchmark settings"""
        return self.config['benchmarks']

    @property
    def sandbox_dir(self) -> Path:
        """Root of the per-plugin file sandboxes"""
        return Path(os.getenv('CQUIC_SANDBOX_DIR') or self.engine['sandbox_dir'])

    @property
    def plugin_build_dir(self) -> Path:
        """Where built plugin binaries are written"""
        return Path(os.getenv('CQUIC_PLUGIN_DIR') or self.plugins['build_dir'])


# Global config instance
config = CoreQuicConfig()
