"""
Plugin authoring kit: WAT runtime helpers, builder and binary utilities.

`src.sdk.inspect` depends on the engine runtime and is imported directly.
"""

from src.sdk.builder import TAGS, PluginBuilder, PluginManifest, manifest_of

__all__ = ["PluginBuilder", "PluginManifest", "TAGS", "manifest_of"]
