import logging
import os
from collections.abc import MutableMapping
from typing import Iterable, Optional, Union

import requests_cache

from .exceptions import WrongDirectory

logger = logging.getLogger(__name__)


class Cache:
    """Process-wide cached HTTP session for dataset downloads."""

    _session = None

    @staticmethod
    def path_create(path: str) -> str:
        """Build the cache location inside `path`.

        Args:
            path (str): Directory holding the cache.

        Returns:
            str: Path of the cache directory.

        Raises:
            WrongDirectory: `path` does not exist.
        """
        if not os.path.isdir(path):
            raise WrongDirectory()
        return os.path.join(path, "s3pool_cache")

    @classmethod
    def cache_enable(
        cls,
        path: str,
        expires_after: Union[None, int, float, str] = None,
        clear: bool = False,
    ):
        """Open a filesystem-backed cached session.

        Large binary archives are stored one file per response instead of in
        a database.

        Args:
            path (str): Directory for the cache.
            expires_after (None, int, float, str): Time after which cached
                items expire. None keeps them forever.
            clear (bool): Empty the cache first.

        Raises:
            WrongDirectory: `path` does not exist.
        """
        cls._session = requests_cache.CachedSession(
            cache_name=Cache.path_create(path),
            backend="filesystem",
            allowable_methods=("GET",),
            expire_after=expires_after,
            stale_if_error=True,
        )
        if clear:
            cls._session.cache.clear()

    @classmethod
    def cache_get(cls, url: str):
        """GET `url` through the cached session, opening one in the current directory if needed.

        Returns:
            requests.models.Response: Response with status below 400.

        Raises:
            requests.HTTPError: The server answered with an error status.
        """
        if cls._session is None:
            cls.cache_enable(os.getcwd())
        response = cls._session.get(url)
        logger.debug(
            "GET %s (%s)", url, "cache hit" if getattr(response, "from_cache", False) else "downloaded"
        )
        response.raise_for_status()
        return response


def flat_dict(d: dict, keys: Optional[Iterable[str]] = None, sep: str = "_") -> dict:
    """Flatten nested mappings into one level, joining keys with `sep`.

    Args:
        d (dict): Mapping to flatten.
        keys (Iterable[str], optional): Only these nested keys are expanded;
            other nested mappings are kept as values. Expands all when None.
        sep (str): Separator between parent and child keys.
    """
    expand = None if keys is None else set(keys)

    def _items(mapping, parent):
        for k, v in mapping.items():
            name = f"{parent}{sep}{k}" if parent else str(k)
            if isinstance(v, MutableMapping) and (expand is None or k in expand):
                yield from _items(v, name)
            else:
                yield name, v

    return dict(_items(d, ""))
