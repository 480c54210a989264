import sys

from ui.ui_constants import Theme


class StatusReport:
    @staticmethod
    def show(title, message, is_error=False, stream=None):
        prefix = Theme.ERROR_PREFIX if is_error else Theme.SUCCESS_PREFIX
        stream = stream or (sys.stderr if is_error else sys.stdout)
        stream.write(f"{prefix}: {title}: {message}\n")
        stream.flush()

    @staticmethod
    def error(code, message, stream=None):
        # one machine-parseable line: sdhsi-error: <CODE>: <message>
        StatusReport.show(code, " ".join(str(message).split()), is_error=True, stream=stream)

    @staticmethod
    def block(text, stream=None):
        stream = stream or sys.stdout
        stream.write(text if text.endswith("\n") else text + "\n")
        stream.flush()
