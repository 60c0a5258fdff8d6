from .mock import mock_rewriter  # noqa: F401
