#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace cprobe::unicode {

struct Decoded {
  char32_t codepoint;
  std::size_t length;  // bytes consumed
  bool valid;
};

// Decodes one UTF-8 sequence at `pos`. Malformed input consumes one byte and
// reports valid == false.
Decoded decode_at(std::string_view text, std::size_t pos);

void append_utf8(std::string& out, char32_t cp);

bool is_letter(char32_t cp);
bool is_number(char32_t cp);
bool is_space(char32_t cp);

}  // namespace cprobe::unicode
