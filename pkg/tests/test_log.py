import json
import logging

from evidencemap.log import JsonFormatter, configure_logging, logger


def _record(**extra):
    record = logging.LogRecord("evidencemap.training", logging.INFO, "training.py", 10, "Epoch %d done", (3,), None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


def test_json_lines_carry_run_context():
    line = json.loads(JsonFormatter().format(_record(record_id="q7", epoch=3, step=12, arm="cor")))
    assert line["message"] == "Epoch 3 done"
    assert line["level"] == "INFO"
    assert (line["record_id"], line["epoch"], line["step"], line["arm"]) == ("q7", 3, 12, "cor")


def test_absent_context_is_omitted():
    line = json.loads(JsonFormatter().format(_record()))
    assert not {"record_id", "epoch", "step", "arm"} & set(line)


def test_extra_reaches_the_formatter(caplog):
    configure_logging("DEBUG", json_format=True)
    logger.propagate = True
    try:
        with caplog.at_level(logging.INFO, logger="evidencemap"):
            logging.getLogger("evidencemap.training").info("Epoch %d", 1, extra={"epoch": 1, "step": 4})
    finally:
        logger.propagate = False
    line = json.loads(JsonFormatter().format(caplog.records[-1]))
    assert line["epoch"] == 1 and line["step"] == 4


def test_unknown_level_falls_back_to_info():
    configure_logging("chatty")
    assert logger.level == logging.INFO
