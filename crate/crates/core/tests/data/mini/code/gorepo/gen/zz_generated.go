// Code generated by tool. DO NOT EDIT.
package gen

var X = 1
