#include <cstdio>

int main() {
  std::puts("egs: placeholder");
  return 0;
}
