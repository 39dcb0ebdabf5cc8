# Package marker for core modules.
