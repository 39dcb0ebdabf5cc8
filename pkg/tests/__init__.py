# Package marker for tests.
