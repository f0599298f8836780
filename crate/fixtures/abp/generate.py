"""Regenerate reference_cases.json with the adblockparser package as the
reference implementation: `pip install adblockparser && python3 generate.py`.
"""
import json
import os
from urllib.parse import urlparse

from adblockparser import AdblockRules

TYPES = ["script", "image", "stylesheet", "xmlhttprequest", "subdocument", "document", "media", "websocket", "other"]

CASES = [
    # (name, rules, request url, document url, type, third party)
    ("domain anchor matches subdomain", ["||ads.example.com^"], "https://ads.example.com/x.js", "https://news.org/", "script", True),
    ("domain anchor matches deeper subdomain", ["||example.com^"], "https://cdn.a.example.com/p.png", "https://news.org/", "image", True),
    ("domain anchor rejects suffix lookalike", ["||example.com^"], "https://badexample.com/p.png", "https://news.org/", "image", True),
    ("separator matches end of url", ["||tracker.net^"], "https://tracker.net", "https://news.org/", "image", True),
    ("separator rejects label continuation", ["||tracker.net^"], "https://tracker.network/a.gif", "https://news.org/", "image", True),
    ("plain substring", ["banner/"], "https://site.com/img/banner/1.png", "https://site.com/", "image", False),
    ("plain substring miss", ["banner/"], "https://site.com/img/banners.png", "https://site.com/", "image", False),
    ("wildcard spans path", ["/ads/*/track"], "https://x.com/ads/v2/2019/track?id=1", "https://x.com/", "xmlhttprequest", False),
    ("start anchor", ["|https://cdn.lib.org/"], "https://cdn.lib.org/jquery.js", "https://news.org/", "script", True),
    ("start anchor rejects other scheme", ["|https://cdn.lib.org/"], "http://cdn.lib.org/jquery.js", "https://news.org/", "script", True),
    ("end anchor", ["swf|"], "https://media.net/movie.swf", "https://news.org/", "other", True),
    ("end anchor rejects query", ["swf|"], "https://media.net/movie.swf?x=1", "https://news.org/", "other", True),
    ("type option matches", ["||pix.com^$image"], "https://pix.com/a.gif", "https://news.org/", "image", True),
    ("type option excludes other type", ["||pix.com^$image"], "https://pix.com/a.js", "https://news.org/", "script", True),
    ("negated type", ["||w.com^$~image"], "https://w.com/a.js", "https://news.org/", "script", True),
    ("negated type excludes", ["||w.com^$~image"], "https://w.com/a.png", "https://news.org/", "image", True),
    ("third-party option on third-party request", ["/collect$third-party"], "https://stats.io/collect?v=1", "https://shop.com/", "xmlhttprequest", True),
    ("third-party option on first-party request", ["/collect$third-party"], "https://shop.com/collect?v=1", "https://shop.com/", "xmlhttprequest", False),
    ("first-party option", ["jquery$~third-party"], "https://shop.com/js/jquery.min.js", "https://shop.com/", "script", False),
    ("domain option includes subdomain of listed site", ["/embed/*$domain=site1.com"], "https://w.io/embed/a", "https://www.site1.com/page", "subdocument", True),
    ("domain option excludes other sites", ["/embed/*$domain=site1.com"], "https://w.io/embed/a", "https://site2.com/page", "subdocument", True),
    ("negated domain option", ["/promo/*$domain=~trusted.org"], "https://ads.io/promo/1.png", "https://trusted.org/", "image", True),
    ("negated domain option elsewhere", ["/promo/*$domain=~trusted.org"], "https://ads.io/promo/1.png", "https://other.org/", "image", True),
    ("exception overrides block", ["||adserve.net^", "@@||adserve.net/ok/"], "https://adserve.net/ok/a.js", "https://news.org/", "script", True),
    ("exception does not cover other paths", ["||adserve.net^", "@@||adserve.net/ok/"], "https://adserve.net/bad/a.js", "https://news.org/", "script", True),
    ("typed exception only for its type", ["/ads/*", "@@/ads/allowed$script"], "https://x.com/ads/allowed.png", "https://x.com/", "image", False),
    ("typed exception applies", ["/ads/*", "@@/ads/allowed$script"], "https://x.com/ads/allowed.js", "https://x.com/", "script", False),
    ("case-insensitive match", ["/AdFrame."], "https://x.com/adframe.html", "https://news.org/", "subdocument", True),
    ("query string content", ["&ad_type="], "https://x.com/serve?id=1&ad_type=banner", "https://news.org/", "script", True),
    # rules wrapped in slashes are regular expressions and the reference
    # joins several positive type options with AND, so neither appears here
    ("several negated types", ["||beacon.io^$~script,~image"], "https://beacon.io/b.css", "https://news.org/", "stylesheet", True),
]


def options(doc, rtype, third):
    o = {t: t == rtype for t in TYPES}
    o["third-party"] = third
    o["domain"] = urlparse(doc).hostname
    return o


def main():
    out = []
    for name, rules, url, doc, rtype, third in CASES:
        opts = options(doc, rtype, third)
        blocked = AdblockRules(rules).should_block(url, opts)
        blocks = [r for r in rules if not r.startswith("@@")]
        any_block = AdblockRules(blocks).should_block(url, opts)
        expected = "matched" if blocked else ("excepted" if any_block else "none")
        out.append({
            "name": name,
            "rules": rules,
            "request-url": url,
            "document-url": doc,
            "resource-type": "xhr" if rtype == "xmlhttprequest" else rtype,
            "third-party": third,
            "expected": expected,
        })
    path = os.path.join(os.path.dirname(__file__), "reference_cases.json")
    with open(path, "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
