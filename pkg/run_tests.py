import sys
import unittest
from pathlib import Path

if __name__ == "__main__":
    # 发现 tests/ 下的全部测试（测试文件自行把项目根目录加入 sys.path）
    suite = unittest.TestLoader().discover(str(Path(__file__).parent / "tests"), pattern="test_*.py")
    result = unittest.TextTestRunner(verbosity=2).run(suite)
    sys.exit(0 if result.wasSuccessful() else 1)
