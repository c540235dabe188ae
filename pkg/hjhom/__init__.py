from .__main__ import VERSION
