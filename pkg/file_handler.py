import json
import os
from typing import Any, Dict, Iterable, List

import pandas as pd


class FileHandler:
    """
    Class for reading and writing the files the tool exchanges: JSON, JSON Lines,
    CSV tables and binary snapshots.

    Writers create missing parent directories and refuse unwritable targets.
    JSON is emitted with the caller's key order and compact separators so that
    repeated runs produce byte-identical files.
    """

    def ensure_parent(self, file_path: str) -> None:
        """
        Create the parent directory of a file if needed and check it is writable.

        Args:
            file_path (str): Path of the file about to be written.
        """
        directory = os.path.dirname(os.path.abspath(file_path))
        if not os.path.exists(directory):
            os.makedirs(directory, exist_ok=True)
        if not os.access(directory, os.W_OK):
            raise OSError(f"Directory {directory} is not writable")
        if os.path.exists(file_path) and not os.access(file_path, os.W_OK):
            raise OSError(f"File {file_path} is not writable")

    def write_jsonl(self, file_path: str, records: Iterable[Dict[str, Any]]) -> int:
        """
        Write one JSON object per line, replacing any existing file.

        Args:
            file_path (str): Target path.
            records (Iterable[dict]): JSON-serializable records.

        Returns:
            int: Number of lines written.
        """
        self.ensure_parent(file_path)
        count = 0
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            for record in records:
                f.write(json.dumps(record, separators=(",", ":")) + "\n")
                count += 1
        return count

    def read_jsonl(self, file_path: str) -> List[Dict[str, Any]]:
        records = []
        with open(file_path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise ValueError(f"{file_path}:{line_no}: invalid JSON ({e})") from e
        return records

    def write_json(self, file_path: str, data: Any) -> None:
        self.ensure_parent(file_path)
        with open(file_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2)
            f.write("\n")

    def read_json(self, file_path: str) -> Any:
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)

    def write_csv(self, file_path: str, frame: pd.DataFrame) -> int:
        """
        Write a DataFrame as CSV without the index.

        Returns:
            int: Number of data rows written.
        """
        self.ensure_parent(file_path)
        frame.to_csv(file_path, index=False, lineterminator="\n")
        return len(frame)

    def write_bytes(self, file_path: str, data: bytes) -> None:
        self.ensure_parent(file_path)
        with open(file_path, "wb") as f:
            f.write(data)

    def read_bytes(self, file_path: str) -> bytes:
        with open(file_path, "rb") as f:
            return f.read()
