import os

from dotenv import load_dotenv

BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# .env 中的 PPDE_LAB_WORKERS / PPDE_LAB_LOG_FILE 等覆盖默认值
load_dotenv(os.path.join(BASE_DIR, '.env'))

SECRET_KEY = os.getenv('DJANGO_SECRET_KEY', 'ppde-lab-local')
DEBUG = False
ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'lab',
]

DATABASES = {}

LANGUAGE_CODE = 'zh-hans'
TIME_ZONE = 'Asia/Shanghai'
USE_I18N = True
USE_TZ = True

# 实验默认值
PPDE_LAB = {
    'WORKERS': int(os.getenv('PPDE_LAB_WORKERS', '1')),
    # 样本块大小决定随机数流，改动后结果不再逐位可比
    'CHUNK_SIZE': 2048,
    'OUTPUT_DIR': os.path.join(BASE_DIR, 'results'),
    'TOLERANCES': {
        'domain': 1e-9,
        'deviation': 1e-12,
        'stderr_multiple': 3.0,
    },
}

LOG_FILE = os.getenv('PPDE_LAB_LOG_FILE', os.path.join(BASE_DIR, 'logs', 'ppde_lab.log'))
os.makedirs(os.path.dirname(LOG_FILE), exist_ok=True)


def _layer_logger():
    return {
        'handlers': ['console', 'file'],
        'level': 'DEBUG',
        'propagate': False,
    }


# 日志管理器配置
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s [%(levelname)s] [%(name)s:%(lineno)d] - %(message)s'
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
            'level': 'INFO',
        },
        'file': {
            'class': 'logging.handlers.RotatingFileHandler',
            'filename': LOG_FILE,
            'maxBytes': 10 * 1024 * 1024,
            'backupCount': 5,
            'formatter': 'verbose',
            'encoding': 'utf-8',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': 'INFO',
    },
    'loggers': {
        'ppde_lab': _layer_logger(),
        'core': _layer_logger(),
        'solvers': _layer_logger(),
        'pipelines': _layer_logger(),
        'lab.commands': _layer_logger(),
    },
}
