"""Affect transfer learning for behavior prediction (ATL-BP)."""
