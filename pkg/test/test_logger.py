import logging

from utils.logger import get_logger, level_from_env


class TestGetLogger:
    def test_layer_logger_uses_settings_handlers(self):
        # conftest 已执行 django.setup()，pipelines 上级带有 handler
        logger = get_logger(name="pipelines.cascade")
        assert logger.name == "pipelines.cascade"
        assert not logging.getLogger("pipelines.cascade").handlers

    def test_fallback_console_handler_added_once(self):
        get_logger(name="standalone_solver_test")
        get_logger(name="standalone_solver_test")
        raw = logging.getLogger("standalone_solver_test")
        assert raw.propagate
        # root 已由 settings 配置，因此同样不需要补 handler
        assert len(raw.handlers) <= 1

    def test_level_names(self):
        assert get_logger(name="core.level_test", level="debug").logger.level == logging.DEBUG
        assert get_logger(name="core.level_test", level="bogus").logger.level == logging.INFO

    def test_level_from_env(self, monkeypatch):
        monkeypatch.setenv("PPDE_LAB_LOG_LEVEL", "WARNING")
        assert level_from_env() == logging.WARNING
        monkeypatch.setenv("PPDE_LAB_LOG_LEVEL", "verbose")
        assert level_from_env() == logging.INFO

    def test_messages_reach_handlers(self, caplog):
        logger = get_logger(name="standalone_message_test", level="info")
        with caplog.at_level(logging.INFO, logger="standalone_message_test"):
            logger.info("锥求解完成")
            logger.debug("不应出现")
        assert [r.getMessage() for r in caplog.records] == ["锥求解完成"]
