"""Tests for in-ear ANC controller design."""
